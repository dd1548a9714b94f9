#pragma once

// Training losses: context alignment, input/output coherence, the
// selection-policy reward and its score-function surrogate, and the weighted
// composite.

#include <span>
#include <vector>

#include "xicl/model.hpp"

namespace xicl::objectives {

using model::ExamplePair;
using model::Model;
using ng::Tensor;

// ContextToFree is KL(p(.|x,C) || p(.|x)); FreeToContext swaps the arguments.
// In both cases the context-free branch is the frozen reference.
enum class KlDirection { ContextToFree, FreeToContext };
// Smooth: per-token gold likelihood. ExactMatch: greedy decode equals gold.
enum class AccuracyMode { Smooth, ExactMatch };

std::string to_string(KlDirection d);
std::string to_string(AccuracyMode m);
KlDirection kl_direction_from_string(const std::string& s);
AccuracyMode accuracy_mode_from_string(const std::string& s);

struct ObjectiveConfig {
  // weight of the in-context task likelihood term; 0 trains on the composite
  // alone
  double nll_weight = 1.0;
  double align_weight = 1.0;
  double lambda = 0.1;
  double gamma = 0.1;
  double alpha = 0.7;
  double beta = 0.3;
  KlDirection kl_direction = KlDirection::ContextToFree;
  AccuracyMode accuracy_mode = AccuracyMode::Smooth;

  void validate() const;
  bool operator==(const ObjectiveConfig&) const = default;
};

struct LossBreakdown {
  double nll = 0.0;
  double align = 0.0;
  double coherence = 0.0;
  double rl = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double gamma = 0.0;
  double align_weight = 1.0;
  double nll_weight = 0.0;
};

struct RewardComponents {
  double accuracy = 0.0;
  double diversity = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double reward = 0.0;
};

// Context-free answer logits for (x, y), computed without gradient. This is
// the frozen reference of the alignment loss.
Tensor reference_logits(const Model& m, std::span<const int> x, std::span<const int> y_gold);

// Mean over gold positions of the KL between the context-conditioned and the
// context-free next-token distributions.
Tensor align_loss(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                  std::span<const int> y_gold, KlDirection dir = KlDirection::ContextToFree);
// Same, with a reference computed earlier by reference_logits.
Tensor align_loss(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                  std::span<const int> y_gold, const Tensor& reference, KlDirection dir = KlDirection::ContextToFree);

// Same, from context-conditioned answer logits the caller already computed.
Tensor align_from_logits(const Tensor& with_context, const Tensor& reference,
                         KlDirection dir = KlDirection::ContextToFree);

// Mean per-token negative log-likelihood of y under answer logits.
Tensor answer_nll(const Tensor& answer_logits, std::span<const int> y);

Tensor coherence_loss(const Model& m, std::span<const int> x, std::span<const int> y);

// D: mean pairwise (1 - cos)/2 over the context inputs' pooled embeddings.
double diversity(std::span<const std::vector<double>> embeddings);

// Pure evaluation, never records a graph. When context_embeddings is empty the
// pooled embeddings of the context inputs are computed here.
RewardComponents reward(const Model& m, std::span<const int> x, std::span<const ExamplePair> context,
                        std::span<const int> y_gold, double alpha, double beta,
                        AccuracyMode mode = AccuracyMode::Smooth,
                        std::span<const std::vector<double>> context_embeddings = {});

Tensor reinforce_loss(const Tensor& log_prob_of_selection, double reward, double baseline);

struct TotalLoss {
  Tensor value;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const Tensor& align, const Tensor& coherence, const Tensor& rl, double lambda, double gamma,
                     double align_weight = 1.0);
// nll_weight * nll added on top of the composite.
TotalLoss total_loss(const Tensor& nll, const Tensor& align, const Tensor& coherence, const Tensor& rl,
                     const ObjectiveConfig& cfg);

}  // namespace xicl::objectives
