#pragma once

// Shared vocabulary types, error hierarchy, small dense-vector helpers and
// portable deterministic hashing/RNG used by every precot module.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace precot {

// ---------------------------------------------------------------------------
// Enumerations
// ---------------------------------------------------------------------------

enum class Answer { yes, no };
enum class Slot { A, B };
enum class PromptMode { cot, no_cot };
enum class TaskName { anachronisms, logical_deduction, social_chemistry, sports_understanding };

inline constexpr std::array<TaskName, 4> kAllTasks = {
    TaskName::anachronisms, TaskName::logical_deduction, TaskName::social_chemistry,
    TaskName::sports_understanding};

inline Answer opposite(Answer a) { return a == Answer::yes ? Answer::no : Answer::yes; }
inline Slot other(Slot s) { return s == Slot::A ? Slot::B : Slot::A; }

inline std::string_view to_string(Answer a) { return a == Answer::yes ? "yes" : "no"; }
inline std::string_view to_string(Slot s) { return s == Slot::A ? "A" : "B"; }
inline std::string_view to_string(PromptMode m) { return m == PromptMode::cot ? "cot" : "no_cot"; }
inline std::string_view to_string(TaskName t) {
  switch (t) {
    case TaskName::anachronisms: return "anachronisms";
    case TaskName::logical_deduction: return "logical_deduction";
    case TaskName::social_chemistry: return "social_chemistry";
    case TaskName::sports_understanding: return "sports_understanding";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PRECOT_DEFINE_ERROR(Name) \
  class Name : public Error {     \
   public:                        \
    using Error::Error;           \
  }

PRECOT_DEFINE_ERROR(LoadError);
PRECOT_DEFINE_ERROR(ConfigError);
PRECOT_DEFINE_ERROR(DegenerateTrainingError);
PRECOT_DEFINE_ERROR(DegenerateProbeError);
PRECOT_DEFINE_ERROR(UndefinedScoreError);
PRECOT_DEFINE_ERROR(UndefinedAucError);
PRECOT_DEFINE_ERROR(SweepError);
PRECOT_DEFINE_ERROR(T0MismatchError);
PRECOT_DEFINE_ERROR(CapabilityError);
PRECOT_DEFINE_ERROR(ImpossibleOrthogonalError);
PRECOT_DEFINE_ERROR(UndefinedIntervalError);
PRECOT_DEFINE_ERROR(LookupError);
PRECOT_DEFINE_ERROR(ProvenanceError);

#undef PRECOT_DEFINE_ERROR

class ContextOverflowError : public Error {
 public:
  ContextOverflowError(std::size_t prompt_tokens, std::size_t requested_new, std::size_t context_limit)
      : Error("context overflow: " + std::to_string(prompt_tokens) + " prompt tokens + " +
              std::to_string(requested_new) + " new tokens exceeds limit " +
              std::to_string(context_limit)),
        prompt_tokens_(prompt_tokens),
        requested_new_(requested_new),
        context_limit_(context_limit) {}

  std::size_t prompt_tokens() const { return prompt_tokens_; }
  std::size_t requested_new() const { return requested_new_; }
  std::size_t context_limit() const { return context_limit_; }

 private:
  std::size_t prompt_tokens_;
  std::size_t requested_new_;
  std::size_t context_limit_;
};

// Raised for network/provider failures that may succeed on retry.
class TransportError : public Error {
 public:
  using Error::Error;
};

class AuditError : public Error {
 public:
  AuditError(const std::string& what, std::vector<std::string> orphans)
      : Error(what), orphans_(std::move(orphans)) {}
  const std::vector<std::string>& orphans() const { return orphans_; }

 private:
  std::vector<std::string> orphans_;
};

// ---------------------------------------------------------------------------
// Dense vectors
// ---------------------------------------------------------------------------

using Vec = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("dot: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vec scaled(std::span<const double> a, double c) {
  Vec out(a.begin(), a.end());
  for (auto& x : out) x *= c;
  return out;
}

inline Vec add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("add: dimension mismatch");
  Vec out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Vec sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("sub: dimension mismatch");
  Vec out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

// a += c * b
inline void axpy(Vec& a, double c, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("axpy: dimension mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedScoreError("cosine: zero-norm vector");
  double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

inline bool all_finite(std::span<const double> a) {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Deterministic hashing and RNG (portable across standard libraries)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mixes any number of string/integer parts into a 64-bit seed.
class SeedMixer {
 public:
  explicit SeedMixer(std::uint64_t base = 0) : h_(splitmix64(base)) {}
  SeedMixer& add(std::string_view s) {
    h_ = splitmix64(h_ ^ fnv1a64(s));
    return *this;
  }
  template <std::integral T>
  SeedMixer& add(T v) {
    h_ = splitmix64(h_ ^ static_cast<std::uint64_t>(v));
    return *this;
  }
  template <std::floating_point T>
  SeedMixer& add(T v) {
    return add(std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// mt19937_64 is bit-exact across implementations; the distributions below are
// written out so draws are too.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1].
  double uniform_open0() { return 1.0 - uniform(); }

  double normal() {
    if (cached_) {
      cached_ = false;
      return cache_;
    }
    const double u1 = uniform_open0();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cache_ = r * std::sin(theta);
    cached_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  Vec normal_vector(std::size_t dim) {
    Vec v(dim);
    for (auto& x : v) x = normal();
    return v;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool cached_ = false;
  double cache_ = 0.0;
};

// Shortest round-trip decimal representation of a double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf.data(), ptr);
}

}  // namespace precot
