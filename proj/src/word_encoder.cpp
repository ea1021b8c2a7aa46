#include "melt/word_encoder.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

namespace melt {

TokenSequence tokenize(std::string_view text, std::size_t limit) {
  TokenSequence out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.tokens.push_back(std::move(current));
      current.clear();
    }
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.tokens.emplace_back(1, raw);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  if (out.tokens.empty()) {
    out.tokens.emplace_back(kEmptyToken);
    return out;
  }
  if (limit > 0 && out.tokens.size() > limit) {
    out.tokens.resize(limit);
    out.truncated = true;
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void PrecomputedVectorStore::insert(const std::string& id, RowVector<float> v) {
  if (v.size() != dim_) {
    throw InputError("vector for '" + id + "' has " + std::to_string(v.size()) +
                     " values, expected " + std::to_string(dim_));
  }
  if (!vectors_.emplace(id, std::move(v)).second) {
    throw InputError("duplicate vector id '" + id + "'");
  }
  order_.push_back(id);
}

const RowVector<float>& PrecomputedVectorStore::at(const std::string& id) const {
  auto it = vectors_.find(id);
  if (it == vectors_.end()) throw InputError("no precomputed vector for '" + id + "'");
  return it->second;
}

namespace {

constexpr char kHexDigits[] = "0123456789abcdef";

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

std::string encode_floats_hex(const RowVector<float>& v) {
  std::string out;
  out.reserve(static_cast<std::size_t>(v.size()) * 8);
  for (Index i = 0; i < v.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v(i));
    for (int byte = 0; byte < 4; ++byte) {
      const unsigned b = (bits >> (8 * byte)) & 0xffU;
      out.push_back(kHexDigits[b >> 4]);
      out.push_back(kHexDigits[b & 0xfU]);
    }
  }
  return out;
}

RowVector<float> decode_floats_hex(std::string_view hex) {
  if (hex.size() % 8 != 0) {
    throw InputError("hex field length " + std::to_string(hex.size()) +
                     " is not a multiple of 8");
  }
  RowVector<float> out(static_cast<Index>(hex.size() / 8));
  for (Index i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int byte = 0; byte < 4; ++byte) {
      const auto pos = static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(byte) * 2;
      const int hi = hex_value(hex[pos]);
      const int lo = hex_value(hex[pos + 1]);
      if (hi < 0 || lo < 0) throw InputError("invalid hex digit");
      bits |= static_cast<std::uint32_t>(hi * 16 + lo) << (8 * byte);
    }
    out(i) = std::bit_cast<float>(bits);
  }
  return out;
}

PrecomputedVectorStore load_precomputed(const std::filesystem::path& path, Index expected_dim) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vector file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("#dim=", 0) != 0) {
    throw InputError(path.string() + ":1: expected '#dim=<d>' header");
  }
  Index dim = 0;
  try {
    dim = std::stol(line.substr(5));
  } catch (const std::exception&) {
    throw InputError(path.string() + ":1: bad dimension in header");
  }
  if (dim < 1) throw InputError(path.string() + ":1: dimension must be positive");
  if (expected_dim > 0 && dim != expected_dim) {
    throw InputError(path.string() + ": dimension " + std::to_string(dim) + " but model uses " +
                     std::to_string(expected_dim));
  }
  PrecomputedVectorStore store(dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (tab == std::string::npos || tab == 0) throw InputError(where + "expected 'id<TAB>hex'");
    RowVector<float> v;
    try {
      v = decode_floats_hex(std::string_view(line).substr(tab + 1));
    } catch (const InputError& e) {
      throw InputError(where + e.what());
    }
    if (v.size() != dim) {
      throw InputError(where + "dimension mismatch: " + std::to_string(v.size()) +
                       " values, expected " + std::to_string(dim));
    }
    try {
      store.insert(line.substr(0, tab), std::move(v));
    } catch (const InputError& e) {
      throw InputError(where + e.what());
    }
  }
  return store;
}

void write_precomputed(const std::filesystem::path& path, const PrecomputedVectorStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vector file " + path.string());
  out << "#dim=" << store.dim() << '\n';
  for (const auto& id : store.ids()) out << id << '\t' << encode_floats_hex(store.at(id)) << '\n';
}

std::unique_ptr<MessageEncoder<float>> make_message_encoder(const nlohmann::json& d) {
  const std::string kind = d.at("kind").get<std::string>();
  if (kind == "hash") {
    return std::make_unique<PooledHashEncoder<float>>(
        d.at("dim").get<Index>(), d.at("buckets").get<std::size_t>(),
        d.at("seed").get<std::uint64_t>(),
        d.value("token_limit", static_cast<std::size_t>(kDefaultTokenLimit)),
        d.contains("scale") ? std::optional<double>(d.at("scale").get<double>()) : std::nullopt);
  }
  if (kind == "precomputed") {
    const std::string path = d.at("path").get<std::string>();
    auto store = std::make_shared<PrecomputedVectorStore>(
        load_precomputed(path, d.at("dim").get<Index>()));
    return std::make_unique<PrecomputedEncoder<float>>(std::move(store), path);
  }
  throw InputError("unknown word encoder kind '" + kind + "'");
}

}  // namespace melt
