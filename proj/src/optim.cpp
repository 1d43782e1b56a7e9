#include "b2p/optim.hpp"

#include <cmath>
#include <numbers>

#include "b2p/error.hpp"

namespace b2p {

double cosine_lr(long step, long total_steps, double base_lr, double min_lr_factor) {
  if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  const double min_lr = base_lr * min_lr_factor;
  if (step == 0) return base_lr;
  if (step == total_steps) return min_lr;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps));
  return min_lr + (base_lr - min_lr) * (1.0 + c) / 2.0;
}

double global_grad_norm(const nn::ParamRefs& params) {
  double sq = 0;
  for (const auto* p : params) {
    if (!p->needs_grad()) continue;
    double local = 0;
    for (float g : p->grad.vec()) local += static_cast<double>(g) * g;
    if (!std::isfinite(local)) throw Error("non-finite gradient in parameter " + p->name);
    sq += local;
  }
  return std::sqrt(sq);
}

ClipResult clip_gradients(const nn::ParamRefs& params, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip_norm must be positive");
  ClipResult r;
  r.norm = global_grad_norm(params);
  if (r.norm > max_norm) {
    r.clipped = true;
    const double scale = max_norm / r.norm;
    for (auto* p : params)
      if (p->needs_grad())
        for (float& g : p->grad.vec()) g = static_cast<float>(g * scale);
  }
  return r;
}

AdamW::AdamW(nn::ParamRefs params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.numel(), 0.0f);
    v_.emplace_back(p->value.numel(), 0.0f);
  }
}

void AdamW::step(double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double step_size = lr / bc1;
  const double b1 = beta1_, b2 = beta2_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter* p = params_[k];
    if (!p->needs_grad()) continue;
    const bool decay = weight_decay > 0 && p->role == nn::ParamRole::kWeight;
    const float shrink = static_cast<float>(1.0 - lr * weight_decay);
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* m = m_[k].data();
    float* v = v_[k].data();
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      if (decay) w[i] *= shrink;
      m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * g[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * static_cast<double>(g[i]) * g[i]);
      const double denom = std::sqrt(v[i] / bc2) + eps_;
      w[i] = static_cast<float>(w[i] - step_size * m[i] / denom);
    }
  }
}

namespace {

void blend(Tensor& shadow, const Tensor& value, double decay) {
  if (!shadow.same_shape(value))
    throw ValidationError("ema_update: shape mismatch " + shadow.shape_str() + " vs " + value.shape_str());
  float* s = shadow.data();
  const float* v = value.data();
  for (std::size_t i = 0; i < shadow.numel(); ++i)
    s[i] = static_cast<float>(decay * s[i] + (1.0 - decay) * v[i]);
}

}  // namespace

void ema_update(std::vector<Tensor>& shadow, const std::vector<const Tensor*>& values, double decay) {
  if (shadow.size() != values.size()) throw ValidationError("ema_update: tensor count mismatch");
  for (std::size_t k = 0; k < shadow.size(); ++k) blend(shadow[k], *values[k], decay);
}

EmaState::EmaState(const nn::ParamRefs& state, double decay, bool warmup)
    : decay_(decay), warmup_(warmup) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema_decay must lie in [0,1)");
  for (const auto* p : state) {
    shadow_.push_back(p->value);
    averaged_.push_back(p->trainable || p->role == nn::ParamRole::kBuffer);
  }
}

double EmaState::effective_decay() const {
  if (!warmup_) return decay_;
  const double n = static_cast<double>(steps_);
  return std::min(decay_, (1.0 + n) / (10.0 + n));
}

void EmaState::update(const nn::ParamRefs& state) {
  if (state.size() != shadow_.size()) throw ValidationError("ema: state layout changed");
  const double d = effective_decay();
  for (std::size_t k = 0; k < state.size(); ++k) {
    if (averaged_[k])
      blend(shadow_[k], state[k]->value, d);
    else
      shadow_[k].vec() = state[k]->value.vec();
  }
  ++steps_;
}

void EmaState::copy_to(const nn::ParamRefs& state) const {
  if (state.size() != shadow_.size()) throw ValidationError("ema: state layout changed");
  for (std::size_t k = 0; k < state.size(); ++k) state[k]->value.vec() = shadow_[k].vec();
}

void EmaState::swap_with(const nn::ParamRefs& state) {
  if (state.size() != shadow_.size()) throw ValidationError("ema: state layout changed");
  for (std::size_t k = 0; k < state.size(); ++k) std::swap(state[k]->value.vec(), shadow_[k].vec());
}

}  // namespace b2p
