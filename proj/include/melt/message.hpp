#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace melt {

/// One message (a tweet) by one author.
struct RawMessage {
  std::string user_id;
  std::string message_id;
  std::int64_t timestamp = 0;
  std::string text;

  bool operator==(const RawMessage&) const = default;
};

/// Stance classes in their fixed order; the order also breaks ties.
enum class Stance : int { Against = 0, None = 1, Favor = 2 };

inline constexpr int kStanceClasses = 3;
inline constexpr std::array<Stance, 3> kAllStances = {Stance::Against, Stance::None,
                                                      Stance::Favor};

inline constexpr std::array<std::string_view, 5> kStanceTargets = {
    "abortion", "atheism", "climate", "clinton", "feminism"};

inline std::string_view stance_name(Stance s) {
  switch (s) {
    case Stance::Against: return "against";
    case Stance::None: return "none";
    case Stance::Favor: return "favor";
  }
  return "?";
}

inline std::optional<Stance> parse_stance(std::string_view text) {
  if (text == "against") return Stance::Against;
  if (text == "none") return Stance::None;
  if (text == "favor") return Stance::Favor;
  return std::nullopt;
}

inline bool is_stance_target(std::string_view target) {
  for (auto t : kStanceTargets) {
    if (t == target) return true;
  }
  return false;
}

}  // namespace melt
