#pragma once

// Checkpoints: one tensor file per parameter plus a JSON manifest with names, shapes and frozen flags.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>
#include "slotid/params.hpp"
#include "slotid/tensor_io.hpp"

namespace slotid {

inline std::string param_file_name(const std::string& name) { return name + ".slid"; }

/// Writes all parameters by default, or only trainable groups when `trainable_only` is set.
template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& dir, long step, bool trainable_only) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["step"] = step;
  manifest["frozen_hash"] = store.frozen_hash();
  manifest["params"] = nlohmann::json::array();
  for (const auto& p : store.all()) {
    if (trainable_only && !p.trainable) continue;
    io::save(dir / param_file_name(p.name), p.var.value());
    manifest["params"].push_back(
        {{"name", p.name}, {"shape", p.var.shape()}, {"frozen", !p.trainable}, {"file", param_file_name(p.name)}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
}

/// Restores every parameter listed in the manifest; shapes and frozen flags must match the store.
template <class T>
long load_checkpoint(ParamStore<T>& store, const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  for (const auto& e : manifest.at("params")) {
    auto& p = store.get(e.at("name").get<std::string>());
    if (e.at("frozen").get<bool>() == p.trainable)
      throw std::runtime_error("checkpoint: frozen flag mismatch for " + p.name);
    auto t = io::load<T>(dir / e.at("file").get<std::string>());
    if (t.shape() != p.var.shape())
      throw ShapeError("checkpoint: shape mismatch for " + p.name + ": " + shape_str(t.shape()) + " vs " +
                       shape_str(p.var.shape()));
    p.var.mutable_value() = std::move(t);
  }
  return manifest.at("step").get<long>();
}

}  // namespace slotid
