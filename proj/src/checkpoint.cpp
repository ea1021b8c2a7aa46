#include "melt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>

#include "melt/errors.hpp"

namespace melt {

using nlohmann::json;

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  json header = checkpoint.meta;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  json manifest = json::array();
  std::size_t floats = 0;
  for (const auto& t : checkpoint.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", {t.values.rows(), t.values.cols()}}});
    floats += static_cast<std::size_t>(t.values.size());
  }
  header["manifest"] = std::move(manifest);

  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + floats * 4);
  for (const auto& t : checkpoint.tensors) {
    for (Index i = 0; i < t.values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t.values.data()[i]);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffU));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source) {
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw CheckpointTruncatedError(source + ": missing checkpoint header");
  }
  json header;
  try {
    header = json::parse(bytes.substr(0, newline));
  } catch (const json::parse_error& e) {
    throw CheckpointError(source + ": unreadable checkpoint header (" + e.what() + ")");
  }
  if (!header.is_object() || header.value("format", "") != kCheckpointFormat) {
    throw CheckpointError(source + ": not a checkpoint file");
  }
  const int version = header.value("version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError(source + ": checkpoint version " + std::to_string(version) +
                                 ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  const json manifest = header.at("manifest");
  std::size_t offset = newline + 1;
  for (const auto& entry : manifest) {
    CheckpointTensor t;
    Index rows = 0;
    Index cols = 0;
    try {
      t.name = entry.at("name").get<std::string>();
      rows = entry.at("shape").at(0).get<Index>();
      cols = entry.at("shape").at(1).get<Index>();
    } catch (const json::exception&) {
      throw CheckpointManifestError(source + ": malformed manifest entry");
    }
    if (rows < 0 || cols < 0) throw CheckpointManifestError(source + ": negative tensor shape");
    const auto count = static_cast<std::size_t>(rows * cols);
    if (bytes.size() - offset < count * 4) {
      throw CheckpointTruncatedError(source + ": truncated at tensor '" + t.name + "'");
    }
    t.values.resize(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i * 4 + b]))
                << (8 * b);
      }
      t.values.data()[i] = std::bit_cast<float>(bits);
    }
    offset += count * 4;
    ckpt.tensors.push_back(std::move(t));
  }
  if (offset != bytes.size()) {
    throw CheckpointManifestError(source + ": " + std::to_string(bytes.size() - offset) +
                                  " bytes beyond the manifest");
  }
  header.erase("format");
  header.erase("version");
  header.erase("manifest");
  ckpt.meta = std::move(header);
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw InputError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

void append_tensors(Checkpoint& checkpoint, const std::vector<NamedTensor<float>>& tensors) {
  for (const auto& nt : tensors) checkpoint.tensors.push_back({nt.name, nt.tensor.value()});
}

void load_tensors(const Checkpoint& checkpoint, const std::vector<NamedTensor<float>>& tensors) {
  for (const auto& nt : tensors) {
    const CheckpointTensor* src = checkpoint.find(nt.name);
    if (!src) throw CheckpointManifestError("checkpoint has no tensor '" + nt.name + "'");
    if (src->values.rows() != nt.tensor.rows() || src->values.cols() != nt.tensor.cols()) {
      throw CheckpointManifestError(
          "tensor '" + nt.name + "' is " + shape_string(src->values.rows(), src->values.cols()) +
          " in the checkpoint but " + nt.tensor.shape_str() + " in the model");
    }
    Tensor<float> t = nt.tensor;
    t.mutable_value() = src->values;
  }
}

Checkpoint make_model_checkpoint(const MeltModel<float>& model, json meta) {
  Checkpoint ckpt;
  meta["config"] = model.config();
  ckpt.meta = std::move(meta);
  append_tensors(ckpt, model.named_parameters());
  return ckpt;
}

MeltModel<float> model_from_checkpoint(const Checkpoint& checkpoint) {
  MeltConfig config;
  try {
    config = checkpoint.meta.at("config").get<MeltConfig>();
  } catch (const json::exception&) {
    throw CheckpointManifestError("checkpoint has no usable model config");
  }
  Rng rng(0);
  MeltModel<float> model(config, rng);
  load_tensors(checkpoint, model.named_parameters());
  return model;
}

}  // namespace melt
