#include "deepssm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace deepssm::nn {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'S', 'M', '0', '0', '0', '1'};

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64_le(std::ostream& os, const double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values),
             static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &values[i], 8);
      write_u64_le(os, bits);
    }
  }
}

void read_f64_le(std::istream& is, double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(values),
            static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t bits = read_u64_le(is);
      std::memcpy(&values[i], &bits, 8);
    }
  }
}

nlohmann::json spec_to_json(const LayerSpec& s) {
  nlohmann::json j;
  j["kind"] = s.kind;
  if (s.kind == "conv3d") {
    j["in_channels"] = s.in_channels;
    j["out_channels"] = s.out_channels;
    j["kernel"] = s.kernel;
  } else if (s.kind == "fully_connected" || s.kind == "fixed_linear") {
    j["in_features"] = s.in_features;
    j["out_features"] = s.out_features;
  } else if (s.kind == "prelu" || s.kind == "batch_norm") {
    j["channels"] = s.channels;
  } else if (s.kind == "max_pool3d") {
    j["factor"] = s.factor;
  } else if (s.kind == "leaky_relu") {
    j["negative_slope"] = s.negative_slope;
  }
  return j;
}

LayerSpec spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.kind = j.at("kind").get<std::string>();
  s.in_channels = j.value("in_channels", 0u);
  s.out_channels = j.value("out_channels", 0u);
  s.kernel = j.value("kernel", 0u);
  s.in_features = j.value("in_features", 0u);
  s.out_features = j.value("out_features", 0u);
  s.channels = j.value("channels", 0u);
  s.factor = j.value("factor", 0u);
  s.negative_slope = j.value("negative_slope", 0.0);
  s.validate();
  return s;
}

}  // namespace

CheckpointSection& Checkpoint::add_section(const std::string& name) {
  sections.push_back(CheckpointSection{name, {}, {}});
  return sections.back();
}

const CheckpointSection* Checkpoint::find_section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

double Checkpoint::meta(const std::string& key) const {
  auto it = meta_num.find(key);
  if (it == meta_num.end())
    throw std::runtime_error("checkpoint: missing numeric metadata '" + key + "'");
  return it->second;
}

std::string Checkpoint::meta_string(const std::string& key) const {
  auto it = meta_str.find(key);
  if (it == meta_str.end())
    throw std::runtime_error("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["format"] = "deepssm-checkpoint";
  manifest["version"] = 1;
  manifest["meta_str"] = meta_str;
  manifest["meta_num"] = meta_num;
  nlohmann::json jsections = nlohmann::json::array();
  for (const auto& sec : sections) {
    nlohmann::json js;
    js["name"] = sec.name;
    js["specs"] = nlohmann::json::array();
    for (const auto& spec : sec.specs) js["specs"].push_back(spec_to_json(spec));
    js["tensors"] = nlohmann::json::array();
    for (const auto& nt : sec.tensors) {
      js["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
    }
    jsections.push_back(std::move(js));
  }
  manifest["sections"] = std::move(jsections);
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& sec : sections)
    for (const auto& nt : sec.tensors)
      write_f64_le(os, nt.tensor.data(), nt.tensor.size());
  os.flush();
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const std::uint64_t len = read_u64_le(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("checkpoint: truncated manifest in " + path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: manifest parse error in " + path.string() +
                             ": " + e.what());
  }
  if (manifest.value("format", "") != "deepssm-checkpoint")
    throw std::runtime_error("checkpoint: unrecognized format field in " + path.string());

  Checkpoint ckpt;
  ckpt.meta_str = manifest.value("meta_str", std::map<std::string, std::string>{});
  ckpt.meta_num = manifest.value("meta_num", std::map<std::string, double>{});
  for (const auto& js : manifest.at("sections")) {
    CheckpointSection sec;
    sec.name = js.at("name").get<std::string>();
    for (const auto& jspec : js.at("specs")) sec.specs.push_back(spec_from_json(jspec));
    for (const auto& jt : js.at("tensors")) {
      const Shape shape = jt.at("shape").get<Shape>();
      Tensor t(shape);
      read_f64_le(is, t.data(), t.size());
      sec.tensors.push_back({jt.at("name").get<std::string>(), std::move(t)});
    }
    ckpt.sections.push_back(std::move(sec));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path.string());
  return ckpt;
}

void restore_tensors(const CheckpointSection& stored,
                     const std::vector<NamedTensor>& live) {
  for (const NamedTensor& dst : live) {
    const NamedTensor* src = nullptr;
    for (const NamedTensor& s : stored.tensors)
      if (s.name == dst.name) {
        src = &s;
        break;
      }
    if (!src)
      throw std::runtime_error("checkpoint: section '" + stored.name +
                               "' has no tensor named '" + dst.name + "'");
    if (src->tensor.shape() != dst.tensor.shape())
      throw std::runtime_error("checkpoint: tensor '" + dst.name + "' has shape " +
                               shape_str(src->tensor.shape()) + ", expected " +
                               shape_str(dst.tensor.shape()));
    Tensor t = dst.tensor;  // handle copy; writes through to the live storage
    t.copy_values_from(src->tensor);
  }
}

}  // namespace deepssm::nn
