#pragma once

#include <span>
#include <vector>

#include "dlcl/model.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl::train {

struct BeamConfig {
  std::size_t beam_size = 4;
  double alpha = 0.6;
  std::size_t max_len = 32;  // tokens, eos included

  void validate() const;
};

// ((5 + len) / 6)^alpha
double length_penalty(std::size_t len, double alpha);
double sequence_score(double log_prob, std::size_t len, double alpha);

struct Hypothesis {
  std::vector<int> tokens;  // ends with eos
  double log_prob = 0.0;
  double score = 0.0;
};

// Next-token log-probabilities given the tokens emitted so far.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::vector<double> next_log_probs(std::span<const int> prefix) = 0;
  virtual int eos() const = 0;
};

// Encodes one source sentence once and scores target prefixes.
class TransformerScorer : public StepScorer {
 public:
  // `src` holds the payload; eos is appended.
  TransformerScorer(model::Transformer& model, std::span<const int> src);
  std::vector<double> next_log_probs(std::span<const int> prefix) override;
  int eos() const override;

 private:
  model::Transformer& model_;
  nn::TokenBatch src_;
  Tensor memory_;
};

// Argmax at every step (lowest id on ties); eos is forced at max_len.
Hypothesis greedy_decode(StepScorer& scorer, std::size_t max_len, double alpha = 0.0);

// Candidates are ranked by cumulative log-prob. An eos candidate finishes a
// hypothesis only if it ranks within the top beam_size; up to beam_size
// non-eos candidates stay alive. The search ends once beam_size hypotheses
// have finished or max_len is reached (eos forced). The best finished
// hypothesis by score wins; ties go to the earlier-finished, then to the
// lexicographically smaller one. The greedy hypothesis is also scored and
// returned when it is strictly better.
Hypothesis beam_search_decode(StepScorer& scorer, const BeamConfig& cfg);

}  // namespace dlcl::train
