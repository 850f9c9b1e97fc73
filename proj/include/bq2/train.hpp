#pragma once

#include "bq2/model.hpp"

#include <functional>
#include <span>
#include <vector>

namespace bq2 {

class Grammar;

// Returns the loss for a block of logits and writes d loss / d logits.
using LossFn = std::function<double(const Matrix& logits, Matrix& grad_logits)>;

// Model-shaped gradient buffer.
Model zeros_like(const Model& model);

// All trainable tensors of a model in a fixed order.
std::vector<std::span<float>> parameter_views(Model& model);

// One sequence forward + backward in 32-bit. Gradients are accumulated into
// `grads`. Runtime transforms are not supported on this path.
double forward_backward(const Model& model, std::span<const int> tokens, const LossFn& loss, Model& grads);

// Mean next-token cross-entropy over `tokens[1..]` given `tokens[..n-1]`.
LossFn next_token_loss(std::span<const int> tokens);

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

void adam_update(std::vector<std::span<float>> params, std::vector<std::span<float>> grads, AdamState& state,
                 const AdamConfig& cfg, double lr);

struct TrainConfig {
  int steps = 2000;
  int batch = 2;
  int seq_len = 256;
  double lr = 3e-3;
  int warmup = 100;
  double grad_clip = 1.0;
  std::uint64_t data_seed = 17;
};

struct TrainProgress {
  int step = 0;
  double loss = 0.0;
};

// Trains a fresh model on the synthetic grammar. Deterministic in the model
// and data seeds. The returned model has its norm scales folded into the
// adjacent linear layers.
Model train_toy(const ModelConfig& config, const TrainConfig& train, const Grammar& grammar,
                const std::function<void(const TrainProgress&)>& progress = {});

}  // namespace bq2
