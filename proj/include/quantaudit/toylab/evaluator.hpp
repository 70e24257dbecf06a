#pragma once

#include "quantaudit/audit.hpp"
#include "quantaudit/evalset.hpp"
#include "quantaudit/toylab/tinylm.hpp"

namespace quantaudit::toylab {

// Rebuilds the toy model described by a checkpoint's metadata and scores it.
inline CheckpointEvaluator tinylm_evaluator(unsigned threads = 1) {
  return [threads](const CheckpointManifest& m, const TensorMap& tensors, const EvalSet& es) {
    const auto cfg = model_config_from_meta(m.meta);
    const auto model = TinyLM<float>::from_tensors(cfg, tensors);
    return perplexity(model, es, threads);
  };
}

// Evalset settings for the toy lab: drawn from the validation tail only.
struct ToyEvalConfig {
  std::uint32_t n_batches = 8;
  std::uint32_t rows = 4;
  std::uint32_t seq_len = 128;
  std::uint64_t seed = 7;
};

}  // namespace quantaudit::toylab
