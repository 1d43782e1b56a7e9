#pragma once

#include <string>
#include <vector>

#include "b2p/nn/parameter.hpp"

namespace b2p {

// lr = min + (base - min) * (1 + cos(pi * step / total)) / 2, min = base * min_lr_factor.
double cosine_lr(long step, long total_steps, double base_lr, double min_lr_factor);

struct ClipResult {
  double norm = 0;   // global l2 norm before clipping
  bool clipped = false;
};

// Scales all gradients by max_norm / norm when the global norm exceeds
// max_norm. Throws Error naming the first parameter with a non-finite
// gradient.
ClipResult clip_gradients(const nn::ParamRefs& params, double max_norm);

double global_grad_norm(const nn::ParamRefs& params);

// Adam with decoupled weight decay. Decay is applied only to weight-role
// parameters.
class AdamW {
 public:
  AdamW(nn::ParamRefs params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr, double weight_decay);
  long steps() const { return t_; }
  const nn::ParamRefs& params() const { return params_; }

 private:
  nn::ParamRefs params_;
  std::vector<FloatBuffer> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// shadow <- decay * shadow + (1 - decay) * value, per tensor.
void ema_update(std::vector<Tensor>& shadow, const std::vector<const Tensor*>& values, double decay);

// Exponential moving average of a model state. Trainable tensors and
// buffers are averaged; frozen tensors are copied (they never change).
class EmaState {
 public:
  EmaState() = default;
  EmaState(const nn::ParamRefs& state, double decay, bool warmup = false);

  void update(const nn::ParamRefs& state);
  // Decay used for the next update.
  double effective_decay() const;
  long steps() const { return steps_; }
  double decay() const { return decay_; }
  const std::vector<Tensor>& shadow() const { return shadow_; }
  std::vector<Tensor>& shadow() { return shadow_; }
  // Writes the shadow values into a state with the same layout.
  void copy_to(const nn::ParamRefs& state) const;
  void swap_with(const nn::ParamRefs& state);

 private:
  std::vector<Tensor> shadow_;
  std::vector<bool> averaged_;
  double decay_ = 0.999;
  bool warmup_ = false;
  long steps_ = 0;
};

}  // namespace b2p
