#include "melt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace melt {

namespace {

using nlohmann::json;

std::string where(const std::string& source, std::size_t line_no) {
  return source + ":" + std::to_string(line_no) + ": ";
}

template <typename T>
T required_field(const json& obj, const char* key, const std::string& at) {
  auto it = obj.find(key);
  if (it == obj.end()) throw InputError(at + "missing key '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw InputError(at + "key '" + key + "' has the wrong type");
  }
}

RawMessage message_from_json(const json& obj, const std::string& at) {
  if (!obj.is_object()) throw InputError(at + "expected a JSON object");
  RawMessage m;
  // Ids may be written as strings or integers.
  auto id_field = [&](const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw InputError(at + "missing key '" + key + "'");
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    throw InputError(at + "key '" + key + "' must be a string");
  };
  m.user_id = id_field("user_id");
  m.message_id = id_field("message_id");
  m.timestamp = required_field<std::int64_t>(obj, "timestamp", at);
  m.text = required_field<std::string>(obj, "text", at);
  return m;
}

json message_to_json(const RawMessage& m) {
  return {{"user_id", m.user_id},
          {"message_id", m.message_id},
          {"timestamp", m.timestamp},
          {"text", m.text}};
}

template <typename Fn>
void for_each_json_line(std::istream& in, const std::string& source, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(where(source, line_no) + "malformed JSON (" + e.what() + ")");
    }
    fn(obj, where(source, line_no));
  }
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return in;
}

}  // namespace

const UserHistory* Corpus::find_user(const std::string& user_id) const {
  auto it = std::lower_bound(users.begin(), users.end(), user_id,
                             [](const UserHistory& u, const std::string& id) {
                               return u.user_id < id;
                             });
  if (it == users.end() || it->user_id != user_id) return nullptr;
  return &*it;
}

Corpus make_corpus(std::vector<RawMessage> messages) {
  Corpus corpus;
  corpus.messages = std::move(messages);
  std::unordered_set<std::string> seen;
  std::map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < corpus.messages.size(); ++i) {
    const auto& m = corpus.messages[i];
    if (!seen.insert(m.message_id).second) {
      throw InputError("duplicate message_id '" + m.message_id + "'");
    }
    by_user[m.user_id].push_back(i);
  }
  for (auto& [user, idx] : by_user) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& ma = corpus.messages[a];
      const auto& mb = corpus.messages[b];
      if (ma.timestamp != mb.timestamp) return ma.timestamp < mb.timestamp;
      return ma.message_id < mb.message_id;
    });
    corpus.users.push_back({user, std::move(idx)});
  }
  return corpus;
}

Corpus parse_corpus_jsonl(std::istream& in, const std::string& source) {
  std::vector<RawMessage> messages;
  std::unordered_set<std::string> seen;
  for_each_json_line(in, source, [&](const json& obj, const std::string& at) {
    RawMessage m = message_from_json(obj, at);
    if (!seen.insert(m.message_id).second) {
      throw InputError(at + "duplicate message_id '" + m.message_id + "'");
    }
    messages.push_back(std::move(m));
  });
  return make_corpus(std::move(messages));
}

Corpus ingest_jsonl(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_corpus_jsonl(in, path.string());
}

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const RawMessage> messages) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& m : messages) out << message_to_json(m).dump() << '\n';
}

std::size_t SequenceChunk::real_count() const {
  return static_cast<std::size_t>(
      std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.has_value(); }));
}

std::vector<SequenceChunk> build_chunks(const std::string& user_id,
                                        std::span<const std::size_t> history,
                                        std::size_t length) {
  if (length == 0) throw InputError("sequence length must be positive");
  std::vector<SequenceChunk> chunks;
  const std::size_t n = history.size();
  if (n == 0) return chunks;
  if (n < length) {
    SequenceChunk c{user_id, {}, 0};
    c.slots.assign(history.begin(), history.end());
    c.slots.resize(length);
    chunks.push_back(std::move(c));
    return chunks;
  }
  const std::size_t count = (n + length - 1) / length;
  for (std::size_t k = 0; k < count; ++k) {
    // The last window ends at n; starting it at n - length pulls in the
    // missing messages from the window before it.
    const std::size_t start = std::min(k * length, n - length);
    SequenceChunk c{user_id, {}, k};
    c.slots.assign(history.begin() + static_cast<std::ptrdiff_t>(start),
                   history.begin() + static_cast<std::ptrdiff_t>(start + length));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

std::vector<SequenceChunk> build_all_chunks(const Corpus& corpus, std::size_t length) {
  std::vector<SequenceChunk> out;
  for (const auto& user : corpus.users) {
    auto chunks = build_chunks(user.user_id, user.messages, length);
    out.insert(out.end(), std::make_move_iterator(chunks.begin()),
               std::make_move_iterator(chunks.end()));
  }
  return out;
}

DevSplit split_dev(const Corpus& corpus, const DevSplitOptions& options) {
  std::vector<std::size_t> eligible;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    if (corpus.users[u].messages.size() > options.holdout) eligible.push_back(u);
  }
  Rng rng(options.seed);
  rng.shuffle(eligible.begin(), eligible.end());
  const auto picks = static_cast<std::size_t>(
      std::floor(options.user_fraction * static_cast<double>(eligible.size())));
  std::vector<bool> is_dev(corpus.users.size(), false);
  for (std::size_t i = 0; i < picks && options.holdout > 0; ++i) is_dev[eligible[i]] = true;

  DevSplit split;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    const auto& user = corpus.users[u];
    std::span<const std::size_t> all(user.messages);
    std::span<const std::size_t> train = all;
    if (is_dev[u]) {
      train = all.first(all.size() - options.holdout);
      auto dev = build_chunks(user.user_id, all.last(options.holdout), options.length);
      split.dev_chunks.insert(split.dev_chunks.end(), dev.begin(), dev.end());
      split.dev_users.push_back(user.user_id);
    }
    auto chunks = build_chunks(user.user_id, train, options.length);
    split.train_chunks.insert(split.train_chunks.end(), chunks.begin(), chunks.end());
  }
  return split;
}

std::vector<std::size_t> batch_pool(std::span<const SequenceChunk> batch) {
  std::vector<std::size_t> pool;
  for (const auto& chunk : batch) {
    for (const auto& slot : chunk.slots) {
      if (slot) pool.push_back(*slot);
    }
  }
  return pool;
}

std::vector<StanceRow> parse_stance_jsonl(std::istream& in, const std::string& source) {
  std::vector<StanceRow> rows;
  std::unordered_set<std::string> seen;
  for_each_json_line(in, source, [&](const json& obj, const std::string& at) {
    StanceRow row;
    row.message = message_from_json(obj, at);
    if (!seen.insert(row.message.message_id).second) {
      throw InputError(at + "duplicate message_id '" + row.message.message_id + "'");
    }
    row.stance_target = required_field<std::string>(obj, "stance_target", at);
    if (!is_stance_target(row.stance_target)) {
      throw InputError(at + "unknown stance_target '" + row.stance_target + "'");
    }
    const auto label_text = required_field<std::string>(obj, "label", at);
    const auto label = parse_stance(label_text);
    if (!label) throw InputError(at + "unknown label '" + label_text + "'");
    row.label = *label;
    rows.push_back(std::move(row));
  });
  return rows;
}

std::vector<StanceRow> load_stance_jsonl(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_stance_jsonl(in, path.string());
}

void write_stance_jsonl(const std::filesystem::path& path, std::span<const StanceRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : rows) {
    json obj = message_to_json(r.message);
    obj["stance_target"] = r.stance_target;
    obj["label"] = std::string(stance_name(r.label));
    out << obj.dump() << '\n';
  }
}

std::vector<StanceExample> attach_history(std::span<const StanceRow> rows, const Corpus* history,
                                          std::size_t max_history) {
  std::vector<StanceExample> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    StanceExample ex{row.message, row.label, row.stance_target, {}};
    const UserHistory* user = history ? history->find_user(row.message.user_id) : nullptr;
    if (user) {
      std::vector<std::size_t> earlier;
      for (std::size_t idx : user->messages) {
        const auto& m = history->messages[idx];
        if (m.timestamp < row.message.timestamp && m.message_id != row.message.message_id) {
          earlier.push_back(idx);
        }
      }
      const std::size_t keep = std::min(max_history, earlier.size());
      for (std::size_t i = earlier.size() - keep; i < earlier.size(); ++i) {
        ex.history.push_back(history->messages[earlier[i]]);
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

FinetuneSequence build_finetune_sequence(const StanceExample& example, std::size_t length) {
  if (length == 0) throw InputError("sequence length must be positive");
  const std::size_t h = example.history.size();
  const std::size_t keep = std::min(h, length - 1);
  FinetuneSequence seq;
  seq.chunk.user_id = example.target.user_id;
  for (std::size_t i = h - keep; i < h; ++i) seq.chunk.slots.emplace_back(i);
  seq.target_slot = seq.chunk.slots.size();
  seq.chunk.slots.emplace_back(h);
  seq.chunk.slots.resize(length);
  return seq;
}

}  // namespace melt
