#include "bq2/grammar.hpp"

#include "bq2/errors.hpp"
#include "bq2/tasks.hpp"

#include <algorithm>
#include <set>

namespace bq2 {

namespace {

constexpr std::string_view kConsonants = "bcdfghjklmnprstwz";
constexpr std::string_view kVowels = "aeiouy";
constexpr std::string_view kMarkers = "ABCDEFGHIJKLMNOPRSTUWZ";
constexpr double kInterruptProbability = 0.1;

char pick(Rng& rng, std::string_view alphabet) { return alphabet[rng.below(alphabet.size())]; }

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

Grammar::Grammar(std::uint64_t seed, int n_stems, int sentence_words) : seed_(seed), sentence_words_(sentence_words) {
  if (n_stems < 4 || sentence_words < 3) throw ConfigError("grammar: need >= 4 stems and >= 3 words per sentence");
  Rng rng(mix_seed(seed, 0x4752414dULL));

  std::vector<char> pool(kMarkers.begin(), kMarkers.end());
  shuffle(pool, rng);
  markers_.assign(pool.begin(), pool.begin() + kCases);

  std::set<std::string> seen;
  while (static_cast<int>(stems_.size()) < n_stems) {
    std::string s;
    s += pick(rng, kConsonants);
    s += pick(rng, kVowels);
    s += pick(rng, kConsonants);
    s += pick(rng, kVowels);
    if (seen.insert(s).second) stems_.push_back(s);
  }
  classes_.resize(stems_.size());
  for (std::size_t i = 0; i < stems_.size(); ++i) classes_[i] = static_cast<int>(i % kClasses);
  shuffle(classes_, rng);

  // Successor chain: a permutation without fixed points.
  std::vector<int> perm(stems_.size());
  for (;;) {
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    shuffle(perm, rng);
    bool fixed = false;
    for (std::size_t i = 0; i < perm.size(); ++i) fixed = fixed || perm[i] == static_cast<int>(i);
    if (!fixed) break;
  }
  next_ = perm;

  suffixes_.assign(kClasses, {});
  for (int c = 0; c < kClasses; ++c) {
    std::set<std::string> used;
    while (static_cast<int>(suffixes_[c].size()) < kCases) {
      std::string s(1, pick(rng, kVowels));
      if (rng.below(2) == 1) s += pick(rng, kConsonants);
      if (used.insert(s).second) suffixes_[c].push_back(s);
    }
  }
}

const std::string& Grammar::suffix(int word_class, int case_id) const {
  return suffixes_[static_cast<std::size_t>(word_class)][static_cast<std::size_t>(case_id)];
}

std::string Grammar::word(int stem, int case_id) const { return this->stem(stem) + suffix(word_class(stem), case_id); }

Grammar::Sentence Grammar::sentence(int case_id, int first_stem) const {
  Sentence s;
  s.case_id = case_id;
  int cur = first_stem;
  for (int i = 0; i < sentence_words_; ++i) {
    s.stems.push_back(cur);
    cur = next_stem(cur);
  }
  return s;
}

Grammar::Sentence Grammar::sample(Rng& rng) const {
  const int case_id = static_cast<int>(rng.below(kCases));
  const int first = static_cast<int>(rng.below(stems_.size()));
  Sentence s = sentence(case_id, first);
  if (rng.uniform() < kInterruptProbability) {
    const int keep = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sentence_words_ - 1)));
    s.stems.resize(static_cast<std::size_t>(keep));
    s.interrupted = true;
  }
  return s;
}

std::string Grammar::render_prefix(const Sentence& s, int words) const {
  std::string out(1, case_marker(s.case_id));
  out += ' ';
  for (int i = 0; i < words; ++i) {
    out += word(s.stems[static_cast<std::size_t>(i)], s.case_id);
    out += ' ';
  }
  return out;
}

std::string Grammar::render(const Sentence& s) const {
  std::string out(1, case_marker(s.case_id));
  for (int st : s.stems) {
    out += ' ';
    out += word(st, s.case_id);
  }
  out += s.interrupted ? "\n" : ".\n";
  return out;
}

std::vector<int> Grammar::stream(Rng& rng, std::size_t n_tokens) const {
  std::vector<int> out;
  out.reserve(n_tokens + 64);
  while (out.size() < n_tokens) {
    for (char c : render(sample(rng))) out.push_back(static_cast<unsigned char>(c));
  }
  out.resize(n_tokens);
  return out;
}

namespace {

std::vector<int> distinct_others(Rng& rng, int n, int exclude, int count) {
  std::vector<int> pool;
  for (int i = 0; i < n; ++i)
    if (i != exclude) pool.push_back(i);
  shuffle(pool, rng);
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

// Places `gold` among `others` at a random position; returns the gold index.
int place_gold(Rng& rng, std::vector<std::string>& options, std::string gold, std::vector<std::string> others) {
  const int pos = static_cast<int>(rng.below(others.size() + 1));
  options = std::move(others);
  options.insert(options.begin() + pos, std::move(gold));
  return pos;
}

}  // namespace

std::vector<ToyTask> make_mc_tasks(const Grammar& g, int n_per_family, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x4d43ULL));
  std::vector<ToyTask> tasks;
  const int words = g.sentence_words();
  for (int i = 0; i < n_per_family; ++i) {
    const Grammar::Sentence s = g.sentence(static_cast<int>(rng.below(Grammar::kCases)),
                                           static_cast<int>(rng.below(static_cast<std::uint64_t>(g.n_stems()))));
    const int pos = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(words - 2)));
    const int st = s.stems[static_cast<std::size_t>(pos)];
    ToyTask t;
    t.id = "case_mc-" + std::to_string(i);
    t.task = "case_mc";
    t.kind = TaskKind::mc;
    t.context = g.render_prefix(s, pos) + g.stem(st);
    std::vector<std::string> others;
    for (int c : distinct_others(rng, Grammar::kCases, s.case_id, 3)) others.push_back(g.suffix(g.word_class(st), c) + " ");
    t.gold = place_gold(rng, t.options, g.suffix(g.word_class(st), s.case_id) + " ", others);
    tasks.push_back(std::move(t));
  }
  for (int i = 0; i < n_per_family; ++i) {
    const Grammar::Sentence s = g.sentence(static_cast<int>(rng.below(Grammar::kCases)),
                                           static_cast<int>(rng.below(static_cast<std::uint64_t>(g.n_stems()))));
    const int pos = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(words - 1)));
    const int st = s.stems[static_cast<std::size_t>(pos)];
    ToyTask t;
    t.id = "next_mc-" + std::to_string(i);
    t.task = "next_mc";
    t.kind = TaskKind::mc;
    t.context = g.render_prefix(s, pos);
    std::vector<std::string> others;
    for (int o : distinct_others(rng, g.n_stems(), st, 3)) others.push_back(g.word(o, s.case_id));
    t.gold = place_gold(rng, t.options, g.word(st, s.case_id), others);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<ToyTask> make_gen_tasks(const Grammar& g, int n_per_family, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x47454eULL));
  std::vector<ToyTask> tasks;
  const int words = g.sentence_words();
  for (int i = 0; i < n_per_family; ++i) {
    const Grammar::Sentence s = g.sentence(static_cast<int>(rng.below(Grammar::kCases)),
                                           static_cast<int>(rng.below(static_cast<std::uint64_t>(g.n_stems()))));
    ToyTask t;
    t.id = "complete_gen-" + std::to_string(i);
    t.task = "complete_gen";
    t.kind = TaskKind::gen;
    t.context = g.render_prefix(s, 1);
    for (int w = 1; w < words; ++w) {
      if (w > 1) t.target += ' ';
      t.target += g.word(s.stems[static_cast<std::size_t>(w)], s.case_id);
    }
    t.until = ".";
    t.max_tokens = 48;
    tasks.push_back(std::move(t));
  }
  for (int i = 0; i < n_per_family; ++i) {
    const Grammar::Sentence s = g.sentence(static_cast<int>(rng.below(Grammar::kCases)),
                                           static_cast<int>(rng.below(static_cast<std::uint64_t>(g.n_stems()))));
    const int pos = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(words - 1)));
    ToyTask t;
    t.id = "word_regex_gen-" + std::to_string(i);
    t.task = "word_regex_gen";
    t.kind = TaskKind::gen;
    t.context = g.render_prefix(s, pos);
    t.target = g.word(s.stems[static_cast<std::size_t>(pos)], s.case_id);
    t.regex = "[a-z]+";
    t.until = "\n";
    t.max_tokens = 12;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace bq2
