#include "dlcl/decoding.hpp"

#include <algorithm>
#include <cmath>

#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/ops.hpp"
#include "dlcl/tasks.hpp"

namespace dlcl::train {

void BeamConfig::validate() const {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
}

double length_penalty(std::size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

double sequence_score(double log_prob, std::size_t len, double alpha) {
  return log_prob / length_penalty(len, alpha);
}

TransformerScorer::TransformerScorer(model::Transformer& model, std::span<const int> src)
    : model_(model) {
  std::vector<int> row(src.begin(), src.end());
  row.push_back(kEos);
  src_ = nn::TokenBatch::from_rows({row}, model.config().pad_id);
  NoGradScope no_grad;
  nn::ForwardContext ctx(false);
  memory_ = model_.encode(ctx, src_).output;
}

std::vector<double> TransformerScorer::next_log_probs(std::span<const int> prefix) {
  std::vector<int> row{kBos};
  row.insert(row.end(), prefix.begin(), prefix.end());
  auto tgt = nn::TokenBatch::from_rows({row}, model_.config().pad_id);
  NoGradScope no_grad;
  nn::ForwardContext ctx(false);
  Tensor logits = model_.decode(ctx, tgt, memory_, src_);
  const std::size_t v = model_.config().tgt_vocab;
  auto all = logits.data();
  Tensor last({v}, std::vector<double>(all.end() - static_cast<std::ptrdiff_t>(v), all.end()));
  return ops::log_softmax(last).to_vector();
}

int TransformerScorer::eos() const { return kEos; }

Hypothesis greedy_decode(StepScorer& scorer, std::size_t max_len, double alpha) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  Hypothesis h;
  const int eos = scorer.eos();
  while (true) {
    auto lp = scorer.next_log_probs(h.tokens);
    int pick = eos;
    if (h.tokens.size() + 1 < max_len) {
      pick = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    }
    h.tokens.push_back(pick);
    h.log_prob += lp.at(static_cast<std::size_t>(pick));
    if (pick == eos) break;
  }
  h.score = sequence_score(h.log_prob, h.tokens.size(), alpha);
  return h;
}

namespace {

struct Candidate {
  std::vector<int> tokens;
  double log_prob;
};

bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace

Hypothesis beam_search_decode(StepScorer& scorer, const BeamConfig& cfg) {
  cfg.validate();
  const int eos = scorer.eos();
  const std::size_t k = cfg.beam_size;
  std::vector<Candidate> alive{{{}, 0.0}};
  std::vector<Hypothesis> finished;  // in finishing order

  for (std::size_t step = 1; step <= cfg.max_len && !alive.empty(); ++step) {
    std::vector<Candidate> cands;
    for (const auto& h : alive) {
      auto lp = scorer.next_log_probs(h.tokens);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (step == cfg.max_len && static_cast<int>(v) != eos) continue;
        Candidate c{h.tokens, h.log_prob + lp[v]};
        c.tokens.push_back(static_cast<int>(v));
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(), ranks_before);
    std::vector<Candidate> next;
    for (std::size_t r = 0; r < cands.size(); ++r) {
      auto& c = cands[r];
      if (c.tokens.back() == eos) {
        if (r < k) {
          finished.push_back({c.tokens, c.log_prob, sequence_score(c.log_prob, c.tokens.size(), cfg.alpha)});
        }
      } else if (next.size() < k) {
        next.push_back(std::move(c));
      }
    }
    alive = std::move(next);
    if (finished.size() >= k) break;
  }

  // Strictly-greater keeps the earlier-finished entry on equal scores.
  const Hypothesis* best = nullptr;
  for (const auto& h : finished) {
    if (!best || h.score > best->score) best = &h;
  }
  if (!best) throw Error("beam search finished no hypothesis");
  Hypothesis greedy = greedy_decode(scorer, cfg.max_len, cfg.alpha);
  if (greedy.score > best->score) return greedy;
  return *best;
}

}  // namespace dlcl::train
