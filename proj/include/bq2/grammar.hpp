#pragma once

#include "bq2/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace bq2 {

struct ToyTask;

// Seed-deterministic synthetic language. A sentence opens with a case-marker
// byte; every following word is a stem plus a suffix selected by (word class,
// case), so the marker must be carried across the whole sentence. Stems form
// a fixed successor chain, which makes everything after the first word
// predictable and lets a single wrong byte cascade during generation.
//
//   "K tobaem rulo mipeko ..."   marker, stem+suffix, stem+suffix, ...
class Grammar {
 public:
  static constexpr int kCases = 7;
  static constexpr int kClasses = 3;
  static constexpr int kStemLength = 4;

  explicit Grammar(std::uint64_t seed, int n_stems = 24, int sentence_words = 5);

  struct Sentence {
    int case_id = 0;
    std::vector<int> stems;
    bool interrupted = false;  // ends with a bare newline instead of ".\n"
  };

  std::uint64_t seed() const { return seed_; }
  int n_stems() const { return static_cast<int>(stems_.size()); }
  int sentence_words() const { return sentence_words_; }
  char case_marker(int case_id) const { return markers_[static_cast<std::size_t>(case_id)]; }
  const std::string& stem(int s) const { return stems_[static_cast<std::size_t>(s)]; }
  int word_class(int s) const { return classes_[static_cast<std::size_t>(s)]; }
  int next_stem(int s) const { return next_[static_cast<std::size_t>(s)]; }
  const std::string& suffix(int word_class, int case_id) const;
  std::string word(int stem, int case_id) const;

  // A full, uninterrupted sentence starting from `first_stem`.
  Sentence sentence(int case_id, int first_stem) const;
  Sentence sample(Rng& rng) const;
  std::string render(const Sentence& s) const;
  // Marker followed by the first `words` words, each followed by a space.
  std::string render_prefix(const Sentence& s, int words) const;

  // Concatenated sentences, truncated to exactly `n_tokens` bytes.
  std::vector<int> stream(Rng& rng, std::size_t n_tokens) const;

 private:
  std::uint64_t seed_;
  int sentence_words_;
  std::vector<char> markers_;
  std::vector<std::string> stems_;
  std::vector<int> classes_;
  std::vector<int> next_;
  std::vector<std::vector<std::string>> suffixes_;  // [class][case]
};

// Crafted evaluation sets. MC families: "case_mc" (pick the suffix agreeing
// with the sentence marker) and "next_mc" (pick the chained next word). Gen
// families: "complete_gen" (finish the sentence) and "word_regex_gen"
// (first generated word, extracted by regex).
std::vector<ToyTask> make_mc_tasks(const Grammar& grammar, int n_per_family, std::uint64_t seed);
std::vector<ToyTask> make_gen_tasks(const Grammar& grammar, int n_per_family, std::uint64_t seed);

}  // namespace bq2
