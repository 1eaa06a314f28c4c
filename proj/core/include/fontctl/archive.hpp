#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fontctl/nn.hpp"

namespace fontctl {

// Versioned binary container: magic "FCTLCKPT", u32 version, JSON metadata,
// then named double tensors. Used for diffusion and recognizer checkpoints.
struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void put(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
  const Tensor* find(const std::string& name) const;
  bool has_prefix(const std::string& prefix) const;

  // Adds every parameter of the store under prefix + name.
  void put_params(const std::string& prefix, const nn::ParamStore& store);
  // Loads prefix + name into every parameter of the store. Missing names or
  // shape mismatches raise InputError.
  void get_params(const std::string& prefix, nn::ParamStore& store) const;

  std::string serialize() const;
  static TensorArchive deserialize(const std::string& bytes, const std::string& origin = "checkpoint");

  // Atomic write; a failed write leaves no partial file behind.
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);
};

}  // namespace fontctl
