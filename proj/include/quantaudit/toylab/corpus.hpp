#pragma once

// Synthetic order-2 Markov corpus standing in for a real text corpus.
//
// The successor support depends on the previous token b only: `fanout`
// candidates hashed from (seed, b, k). Their probabilities depend on both
// previous tokens through (a mod groups, b). A small transformer can learn
// the support quickly and the second-order weighting more slowly, which
// gives the toy lab a recognisable rapid-learning phase and a plateau.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "quantaudit/error.hpp"
#include "quantaudit/rng.hpp"

namespace quantaudit::toylab {

class MarkovSource {
 public:
  MarkovSource(std::uint64_t seed, std::uint32_t vocab, std::uint32_t fanout = 4, std::uint32_t groups = 4)
      : seed_(seed), vocab_(vocab), fanout_(fanout), groups_(groups) {
    if (vocab_ == 0) throw DomainError("vocabulary must be non-empty");
    if (fanout_ == 0 || fanout_ > 64 || groups_ == 0) throw DomainError("fanout must be in [1, 64] and groups positive");
  }

  std::uint32_t vocab() const { return vocab_; }

  // P(next | a, b) as (token, probability) pairs sorted by token; duplicate
  // candidates are merged.
  std::vector<std::pair<std::uint32_t, double>> transition(std::uint32_t a, std::uint32_t b) const {
    std::map<std::uint32_t, double> acc;
    double total = 0.0;
    for (std::uint32_t k = 0; k < fanout_; ++k) {
      const double w = weight(a, b, k);
      acc[candidate(b, k)] += w;
      total += w;
    }
    std::vector<std::pair<std::uint32_t, double>> out;
    for (auto [tok, w] : acc) out.emplace_back(tok, w / total);
    return out;
  }

  std::uint32_t sample(std::uint32_t a, std::uint32_t b, Rng& rng) const {
    double weights[64];
    double total = 0.0;
    for (std::uint32_t k = 0; k < fanout_; ++k) total += weights[k] = weight(a, b, k);
    double u = rng.uniform() * total;
    for (std::uint32_t k = 0; k < fanout_; ++k) {
      if (u < weights[k]) return candidate(b, k);
      u -= weights[k];
    }
    return candidate(b, fanout_ - 1);
  }

 private:
  std::uint32_t candidate(std::uint32_t b, std::uint32_t k) const {
    return static_cast<std::uint32_t>(hash_combine(hash_combine(seed_, b), 0x100 + k) % vocab_);
  }
  // In [0.05, 1.05); skewed so that one candidate usually dominates.
  double weight(std::uint32_t a, std::uint32_t b, std::uint32_t k) const {
    const auto h = hash_combine(hash_combine(hash_combine(seed_ ^ 0x5eedULL, a % groups_), b), k);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return 0.05 + u * u;
  }

  std::uint64_t seed_;
  std::uint32_t vocab_;
  std::uint32_t fanout_;
  std::uint32_t groups_;
};

// Deterministic stream of `length` tokens from the seeded source.
inline std::vector<std::uint32_t> synth_corpus(std::uint64_t seed, std::int64_t length, std::uint32_t vocab,
                                               std::uint32_t fanout = 4, std::uint32_t groups = 4) {
  if (length < 1) throw DomainError("corpus length must be >= 1");
  const MarkovSource src(seed, vocab, fanout, groups);
  Rng rng(hash_combine(seed, 0xc0de));
  std::vector<std::uint32_t> out;
  out.reserve(static_cast<std::size_t>(length));
  out.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
  if (length > 1) out.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
  while (static_cast<std::int64_t>(out.size()) < length) {
    out.push_back(src.sample(out[out.size() - 2], out.back(), rng));
  }
  return out;
}

struct CorpusConfig {
  std::uint64_t seed = 1234;
  std::uint32_t vocab = 256;
  std::uint32_t fanout = 4;
  std::uint32_t groups = 4;
  std::int64_t train_tokens = 1 << 20;
  std::int64_t validation_tokens = 1 << 16;

  std::string id() const {
    return "markov2:seed=" + std::to_string(seed) + ":vocab=" + std::to_string(vocab) + ":fanout=" +
           std::to_string(fanout) + ":groups=" + std::to_string(groups) + ":train=" + std::to_string(train_tokens) +
           ":val=" + std::to_string(validation_tokens);
  }
};

// One stream split into a training head and a reserved validation tail.
struct SplitCorpus {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> validation;
};

inline SplitCorpus make_corpus(const CorpusConfig& c) {
  if (c.train_tokens < 1 || c.validation_tokens < 1) throw DomainError("corpus splits must be non-empty");
  auto all = synth_corpus(c.seed, c.train_tokens + c.validation_tokens, c.vocab, c.fanout, c.groups);
  SplitCorpus s;
  s.train.assign(all.begin(), all.begin() + c.train_tokens);
  s.validation.assign(all.begin() + c.train_tokens, all.end());
  return s;
}

inline nlohmann::ordered_json to_json(const CorpusConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["vocab"] = c.vocab;
  j["fanout"] = c.fanout;
  j["groups"] = c.groups;
  j["train_tokens"] = c.train_tokens;
  j["validation_tokens"] = c.validation_tokens;
  return j;
}

inline CorpusConfig corpus_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.seed = j.value("seed", c.seed);
  c.vocab = j.value("vocab", c.vocab);
  c.fanout = j.value("fanout", c.fanout);
  c.groups = j.value("groups", c.groups);
  c.train_tokens = j.value("train_tokens", c.train_tokens);
  c.validation_tokens = j.value("validation_tokens", c.validation_tokens);
  return c;
}

}  // namespace quantaudit::toylab
