#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "deepssm/layers.hpp"
#include "deepssm/tensor.hpp"

namespace deepssm::nn {

/// One named group of tensors in a checkpoint — a layer stack (with its
/// LayerSpecs, so the model can be rebuilt without external knowledge) or a
/// bare tensor set such as optimizer moments.
struct CheckpointSection {
  std::string name;
  std::vector<LayerSpec> specs;  // empty for non-layer sections
  std::vector<NamedTensor> tensors;
};

/// On-disk container: 8-byte magic "DSSM0001", little-endian u64 manifest
/// length, UTF-8 JSON manifest (metadata, sections, tensor names and shapes),
/// then each tensor's values as raw little-endian IEEE-754 doubles in
/// manifest order.
struct Checkpoint {
  std::map<std::string, std::string> meta_str;
  std::map<std::string, double> meta_num;
  std::vector<CheckpointSection> sections;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  CheckpointSection& add_section(const std::string& name);
  const CheckpointSection* find_section(const std::string& name) const;
  double meta(const std::string& key) const;  // throws if absent
  std::string meta_string(const std::string& key) const;
};

/// Copy stored values into live tensors, matched by name; every live tensor
/// must be present with an identical shape.
void restore_tensors(const CheckpointSection& stored,
                     const std::vector<NamedTensor>& live);

}  // namespace deepssm::nn
