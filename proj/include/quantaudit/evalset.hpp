#pragma once

// The fixed held-out evaluation set and deterministic perplexity.
//
// File layout (all integers little-endian):
//   magic     8 bytes  "QAEVSET1"
//   n_batches u32
//   rows      u32
//   seq_len   u32
//   vocab     u32
//   seed      u64
//   id_len    u32, followed by id_len bytes of corpus_id (UTF-8)
//   tokens    n_batches * rows * seq_len u32 token ids, batch-major

#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "quantaudit/detail/files.hpp"
#include "quantaudit/error.hpp"
#include "quantaudit/parallel.hpp"
#include "quantaudit/rng.hpp"

namespace quantaudit {

struct EvalSet {
  std::uint32_t n_batches = 0;
  std::uint32_t rows = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t vocab_size = 0;
  std::uint64_t seed = 0;
  std::string corpus_id;
  std::vector<std::uint32_t> tokens;

  std::size_t batch_tokens() const { return static_cast<std::size_t>(rows) * seq_len; }
  std::span<const std::uint32_t> batch(std::size_t b) const {
    return std::span<const std::uint32_t>(tokens).subspan(b * batch_tokens(), batch_tokens());
  }
  std::span<const std::uint32_t> sequence(std::size_t b, std::size_t r) const {
    return batch(b).subspan(r * seq_len, seq_len);
  }
  // Predicted positions: every token but the first of each sequence.
  std::uint64_t predicted_tokens() const {
    return static_cast<std::uint64_t>(n_batches) * rows * (seq_len > 0 ? seq_len - 1 : 0);
  }

  friend bool operator==(const EvalSet&, const EvalSet&) = default;
};

// Cuts the corpus into non-overlapping windows of seq_len tokens and picks
// n_batches * rows of them with a seeded shuffle. The result depends only
// on (corpus, parameters, seed).
inline EvalSet build_evalset(std::span<const std::uint32_t> corpus, std::uint32_t n_batches, std::uint32_t rows,
                             std::uint32_t seq_len, std::uint32_t vocab_size, std::uint64_t seed,
                             std::string corpus_id = "") {
  if (n_batches == 0 || rows == 0 || seq_len < 2) throw DomainError("evalset needs n_batches, rows >= 1 and seq_len >= 2");
  if (vocab_size == 0) throw DomainError("evalset vocab_size must be positive");
  const std::uint64_t needed = static_cast<std::uint64_t>(n_batches) * rows * seq_len;
  if (corpus.size() < needed) {
    throw DomainError("corpus too small for evalset: need " + std::to_string(needed) + " tokens, have " +
                      std::to_string(corpus.size()));
  }
  for (auto t : corpus)
    if (t >= vocab_size) throw DomainError("corpus token id " + std::to_string(t) + " outside vocabulary");

  const std::size_t windows = corpus.size() / seq_len;
  std::vector<std::size_t> order(windows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = windows; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  EvalSet es{n_batches, rows, seq_len, vocab_size, seed, std::move(corpus_id), {}};
  es.tokens.reserve(needed);
  for (std::size_t w = 0; w < static_cast<std::size_t>(n_batches) * rows; ++w) {
    const auto start = order[w] * seq_len;
    es.tokens.insert(es.tokens.end(), corpus.begin() + static_cast<std::ptrdiff_t>(start),
                     corpus.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  }
  return es;
}

namespace detail {

inline constexpr char kEvalSetMagic[8] = {'Q', 'A', 'E', 'V', 'S', 'E', 'T', '1'};

template <class T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const std::vector<char>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("evalset file truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_evalset(const EvalSet& es) {
  std::string out(detail::kEvalSetMagic, sizeof(detail::kEvalSetMagic));
  detail::put_le(out, es.n_batches);
  detail::put_le(out, es.rows);
  detail::put_le(out, es.seq_len);
  detail::put_le(out, es.vocab_size);
  detail::put_le(out, es.seed);
  detail::put_le(out, static_cast<std::uint32_t>(es.corpus_id.size()));
  out += es.corpus_id;
  const auto offset = out.size();
  out.resize(offset + es.tokens.size() * sizeof(std::uint32_t));
  std::memcpy(out.data() + offset, es.tokens.data(), es.tokens.size() * sizeof(std::uint32_t));
  return out;
}

inline void save_evalset(const EvalSet& es, const std::filesystem::path& path) {
  if (es.tokens.size() != static_cast<std::size_t>(es.n_batches) * es.rows * es.seq_len)
    throw ShapeError("evalset token count does not match its dimensions");
  detail::write_file_atomic(path, serialize_evalset(es));
}

inline EvalSet load_evalset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing evalset file " + path.string());
  const auto bytes = detail::read_binary_file(path);
  if (bytes.size() < sizeof(detail::kEvalSetMagic) ||
      std::memcmp(bytes.data(), detail::kEvalSetMagic, sizeof(detail::kEvalSetMagic)) != 0)
    throw FormatError(path.string() + " is not an evalset file");
  std::size_t pos = sizeof(detail::kEvalSetMagic);
  EvalSet es;
  es.n_batches = detail::get_le<std::uint32_t>(bytes, pos);
  es.rows = detail::get_le<std::uint32_t>(bytes, pos);
  es.seq_len = detail::get_le<std::uint32_t>(bytes, pos);
  es.vocab_size = detail::get_le<std::uint32_t>(bytes, pos);
  es.seed = detail::get_le<std::uint64_t>(bytes, pos);
  const auto id_len = detail::get_le<std::uint32_t>(bytes, pos);
  if (pos + id_len > bytes.size()) throw FormatError("evalset file truncated");
  es.corpus_id.assign(bytes.data() + pos, id_len);
  pos += id_len;
  const std::uint64_t n = static_cast<std::uint64_t>(es.n_batches) * es.rows * es.seq_len;
  if (bytes.size() - pos != n * sizeof(std::uint32_t)) {
    throw FormatError("evalset token payload length mismatch (corrupted or truncated): expected " +
                      std::to_string(n * sizeof(std::uint32_t)) + " bytes, found " + std::to_string(bytes.size() - pos));
  }
  es.tokens.resize(n);
  std::memcpy(es.tokens.data(), bytes.data() + pos, n * sizeof(std::uint32_t));
  for (auto t : es.tokens)
    if (t >= es.vocab_size) throw FormatError("evalset token id outside declared vocabulary");
  return es;
}

struct PerplexityResult {
  double ppl = 0.0;
  double mean_ce = 0.0;  // nats per predicted token
  std::uint64_t tokens_counted = 0;
};

// A model that produces next-token logits for one sequence: out holds
// tokens.size() rows of vocab_size() logits, row t predicting token t + 1.
// logits() must be safe to call concurrently.
template <class M>
concept LanguageModel = requires(const M& m, std::span<const std::uint32_t> tokens, std::span<float> out) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.context_length() } -> std::convertible_to<std::size_t>;
  m.logits(tokens, out);
};

// Sum of next-token negative log-likelihoods (nats) for one sequence,
// accumulated in double. Returns NaN if any logit is non-finite.
inline double sequence_nll(std::span<const float> logits, std::span<const std::uint32_t> tokens, std::size_t vocab) {
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const float* row = logits.data() + t * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) {
      if (!std::isfinite(row[v])) return std::numeric_limits<double>::quiet_NaN();
      mx = std::max(mx, static_cast<double>(row[v]));
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
    total += mx + std::log(sum) - static_cast<double>(row[tokens[t + 1]]);
  }
  return total;
}

// Token-weighted mean cross-entropy over the whole set. Batches may run on
// several threads; their partial sums are combined in batch order, so the
// result is bit-identical for any thread count.
template <LanguageModel M>
PerplexityResult perplexity(const M& model, const EvalSet& es, unsigned threads = 1) {
  if (model.vocab_size() < es.vocab_size)
    throw DomainError("model vocabulary (" + std::to_string(model.vocab_size()) + ") smaller than evalset vocabulary (" +
                      std::to_string(es.vocab_size) + ")");
  if (model.context_length() < es.seq_len)
    throw DomainError("model context (" + std::to_string(model.context_length()) + ") shorter than evalset seq_len (" +
                      std::to_string(es.seq_len) + ")");
  const std::size_t vocab = model.vocab_size();
  std::vector<double> partial(es.n_batches, 0.0);
  parallel_for(es.n_batches, threads, [&](std::size_t b) {
    std::vector<float> logits(static_cast<std::size_t>(es.seq_len) * vocab);
    double sum = 0.0;
    for (std::size_t r = 0; r < es.rows; ++r) {
      const auto seq = es.sequence(b, r);
      model.logits(seq, std::span<float>(logits));
      const double nll = sequence_nll(logits, seq, vocab);
      if (std::isnan(nll)) throw EvaluationError("non-finite logits in evaluation batch " + std::to_string(b), static_cast<std::int64_t>(b));
      sum += nll;
    }
    partial[b] = sum;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  PerplexityResult r;
  r.tokens_counted = es.predicted_tokens();
  r.mean_ce = total / static_cast<double>(r.tokens_counted);
  r.ppl = std::exp(r.mean_ce);
  return r;
}

}  // namespace quantaudit
