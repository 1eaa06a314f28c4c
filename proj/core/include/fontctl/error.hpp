#pragma once

#include <stdexcept>
#include <string>

namespace fontctl {

// Base for all library errors. Anything else escaping the library is treated
// as an internal error by the command-line front end.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, missing paths, invalid parameters.
class InputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace fontctl
