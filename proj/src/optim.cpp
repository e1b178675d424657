#include "cimlite/optim.hpp"

#include <cmath>

#include "cimlite/errors.hpp"

namespace cimlite {

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

std::vector<const Tensor*> tape_grads(Tape& tape, const std::vector<int>& ids, size_t expected) {
  require(ids.size() == expected, "optimizer: one tape id per parameter required");
  std::vector<const Tensor*> grads;
  grads.reserve(ids.size());
  static const Tensor no_grad;
  for (int id : ids) grads.push_back(tape.has_grad(id) ? &tape.grad(id) : &no_grad);
  return grads;
}

}  // namespace

void LarsConfig::validate() const {
  require(lr > 0.0, "lars: lr must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "lars: momentum must be in [0,1)");
  require(weight_decay >= 0.0, "lars: weight decay must be >= 0");
  require(trust > 0.0, "lars: trust coefficient must be positive");
  require(eps > 0.0, "lars: eps must be positive");
}

Lars::Lars(std::vector<ParamRef> params, LarsConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.push_back(Tensor(p.value->shape));
}

void Lars::step(const std::vector<const Tensor*>& grads, double lr_scale) {
  require(grads.size() == params_.size(), "lars: one gradient per parameter required");
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = *params_[i].value;
    const Tensor& g = *grads[i];
    const bool has_g = g.numel() > 0;
    if (has_g) require(g.same_shape(w), "lars: gradient shape mismatch");
    const bool exempt = params_[i].exempt;
    const double wd = exempt ? 0.0 : cfg_.weight_decay;

    double local = 1.0;
    if (cfg_.use_adaptation && !exempt) {
      const double wn = l2_norm(w);
      const double gn = has_g ? l2_norm(g) : 0.0;
      if (wn > 0.0 && gn > 0.0) local = cfg_.trust * wn / (gn + wd * wn + cfg_.eps);
    }

    Tensor& vel = velocity_[i];
    const double rate = local * cfg_.lr * lr_scale;
    for (int64_t k = 0; k < w.numel(); ++k) {
      const double gk = has_g ? g.data[static_cast<size_t>(k)] : 0.0;
      const double upd = cfg_.momentum * vel.data[static_cast<size_t>(k)] +
                         rate * (gk + wd * w.data[static_cast<size_t>(k)]);
      if (!std::isfinite(upd))
        throw NumericError("lars: non-finite update for " + params_[i].name);
      vel.data[static_cast<size_t>(k)] = upd;
      w.data[static_cast<size_t>(k)] -= upd;
    }
  }
}

void Lars::step(Tape& tape, const std::vector<int>& ids, double lr_scale) {
  step(tape_grads(tape, ids, params_.size()), lr_scale);
}

void AdamConfig::validate() const {
  require(lr > 0.0, "adam: lr must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "adam: betas must be in [0,1)");
  require(eps > 0.0, "adam: eps must be positive");
}

Adam::Adam(std::vector<ParamRef> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Tensor(p.value->shape));
    v_.push_back(Tensor(p.value->shape));
  }
}

void Adam::step(const std::vector<const Tensor*>& grads, double lr_scale) {
  require(grads.size() == params_.size(), "adam: one gradient per parameter required");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = *params_[i].value;
    const Tensor& g = *grads[i];
    const bool has_g = g.numel() > 0;
    if (has_g) require(g.same_shape(w), "adam: gradient shape mismatch");
    for (int64_t k = 0; k < w.numel(); ++k) {
      const double gk = has_g ? g.data[static_cast<size_t>(k)] : 0.0;
      double& m = m_[i].data[static_cast<size_t>(k)];
      double& v = v_[i].data[static_cast<size_t>(k)];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gk;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gk * gk;
      const double upd = cfg_.lr * lr_scale * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      if (!std::isfinite(upd))
        throw NumericError("adam: non-finite update for " + params_[i].name);
      w.data[static_cast<size_t>(k)] -= upd;
    }
  }
}

void Adam::step(Tape& tape, const std::vector<int>& ids, double lr_scale) {
  step(tape_grads(tape, ids, params_.size()), lr_scale);
}

double cosine_decay(int iter, int total) {
  require(total >= 1, "cosine_decay: total must be >= 1");
  require(iter >= 0 && iter <= total, "cosine_decay: iteration out of range");
  return 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(iter) / static_cast<double>(total)));
}

}  // namespace cimlite
