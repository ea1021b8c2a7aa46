#include "melt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "melt/errors.hpp"
#include "melt/random.hpp"

namespace melt {

namespace {

std::string pool_token(const std::string& pool, std::size_t i) {
  return pool + std::to_string(i);
}

std::string draw(Rng& rng, const std::string& pool, std::size_t size) {
  return pool_token(pool, rng.index(size));
}

void append_token(std::string& text, const std::string& token) {
  if (!text.empty()) text.push_back(' ');
  text += token;
}

std::string message_id(const std::string& user, std::size_t i) {
  return user + "-" + std::to_string(i);
}

}  // namespace

std::vector<RawMessage> synthetic_topic_corpus(const TopicCorpusOptions& o) {
  if (o.users == 0 || o.messages_per_user == 0) throw InputError("topic corpus: empty request");
  if (o.themes_per_user == 0 || o.themes_per_user > o.themes || o.pool_size == 0) {
    throw InputError("topic corpus: bad theme settings");
  }
  Rng rng(o.seed);
  std::vector<RawMessage> out;
  out.reserve(o.users * o.messages_per_user);
  std::vector<std::size_t> all_themes(o.themes);
  std::iota(all_themes.begin(), all_themes.end(), 0);

  for (std::size_t u = 0; u < o.users; ++u) {
    const std::string user = "user" + std::to_string(u);
    rng.shuffle(all_themes.begin(), all_themes.end());
    const std::vector<std::size_t> mine(all_themes.begin(),
                                        all_themes.begin() + static_cast<long>(o.themes_per_user));
    std::size_t current = rng.index(mine.size());
    for (std::size_t m = 0; m < o.messages_per_user; ++m) {
      if (m > 0 && mine.size() > 1 && rng.uniform() >= o.stay) {
        current = (current + 1 + rng.index(mine.size() - 1)) % mine.size();
      }
      const std::string pool = "theme" + std::to_string(mine[current]) + "w";
      std::string text;
      for (std::size_t t = 0; t < o.theme_tokens; ++t) append_token(text, draw(rng, pool, o.pool_size));
      for (std::size_t t = 0; t < o.filler_tokens; ++t) append_token(text, draw(rng, "filler", 40));
      out.push_back({user, message_id(user, m), static_cast<std::int64_t>(m), std::move(text)});
    }
  }
  return out;
}

SyntheticStanceData synthetic_stance_corpus(const StanceCorpusOptions& o) {
  if (o.users == 0) throw InputError("stance corpus: no users");
  if (!is_stance_target(o.stance_target)) {
    throw InputError("stance corpus: unknown target '" + o.stance_target + "'");
  }
  Rng rng(o.seed);
  SyntheticStanceData data;
  for (std::size_t u = 0; u < o.users; ++u) {
    const std::string user = o.user_prefix + std::to_string(u);
    const bool pro = rng.uniform() < 0.5;
    const std::string leaning = pro ? "pro" : "anti";
    for (std::size_t m = 0; m < o.history; ++m) {
      std::string text;
      for (std::size_t t = 0; t < o.tokens_per_message; ++t) {
        const bool lean = rng.uniform() < o.leaning_share;
        append_token(text, lean ? draw(rng, leaning, o.pool_size) : draw(rng, "chat", 60));
      }
      data.messages.push_back({user, message_id(user, m), static_cast<std::int64_t>(m), text});
    }

    const bool neutral = rng.uniform() < o.neutral_fraction;
    std::string text = o.stance_target;
    append_token(text, draw(rng, o.stance_target, o.pool_size));
    std::size_t written = 2;
    for (std::size_t t = 0; t < o.tokens_per_message / 2; ++t, ++written) {
      append_token(text, draw(rng, neutral ? "news" : "opinion", o.pool_size));
    }
    for (; written < o.tokens_per_message; ++written) append_token(text, draw(rng, "chat", 60));
    RawMessage target{user, message_id(user, o.history), static_cast<std::int64_t>(o.history),
                      text};
    data.messages.push_back(target);
    const Stance label = neutral ? Stance::None : (pro ? Stance::Favor : Stance::Against);
    data.rows.push_back({target, o.stance_target, label});
  }
  return data;
}

SyntheticStanceData synthetic_imbalanced_corpus(const ImbalancedCorpusOptions& o) {
  if (o.users == 0) throw InputError("imbalanced corpus: no users");
  const double total = o.class_frequencies[0] + o.class_frequencies[1] + o.class_frequencies[2];
  if (!(total > 0.0)) throw InputError("imbalanced corpus: class frequencies must be positive");
  Rng rng(o.seed);
  SyntheticStanceData data;

  // Exact class counts, then shuffled, so the split matches the frequencies.
  std::vector<Stance> labels;
  std::size_t assigned = 0;
  for (int c = 0; c < kStanceClasses; ++c) {
    std::size_t n = static_cast<std::size_t>(
        std::llround(o.class_frequencies[c] / total * static_cast<double>(o.users)));
    if (c == kStanceClasses - 1) n = o.users - std::min(assigned, o.users);
    n = std::min(n, o.users - assigned);
    labels.insert(labels.end(), n, static_cast<Stance>(c));
    assigned += n;
  }
  rng.shuffle(labels.begin(), labels.end());

  for (std::size_t u = 0; u < o.users; ++u) {
    const std::string user = o.user_prefix + std::to_string(u);
    for (std::size_t m = 0; m <= o.history; ++m) {
      std::string text;
      for (std::size_t t = 0; t < o.tokens_per_message; ++t) append_token(text, draw(rng, "chat", 60));
      RawMessage msg{user, message_id(user, m), static_cast<std::int64_t>(m), std::move(text)};
      data.messages.push_back(msg);
      if (m == o.history) data.rows.push_back({msg, o.stance_target, labels[u]});
    }
  }
  return data;
}

}  // namespace melt
