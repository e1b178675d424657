#include "cimlite/losses.hpp"

#include "cimlite/tape.hpp"

namespace cimlite {

LossValue nt_xent_loss(const Tensor& z, double temperature) {
  require(temperature > 0.0, "nt_xent: temperature must be positive");
  Tape t;
  const int zi = t.push(z);
  const int zn = t.l2_normalize_rows(zi);
  const int sims = t.scale(t.matmul_nt(zn, zn), 1.0 / temperature);
  const int loss = t.ntxent_from_sims(sims);
  t.backward(loss);
  return {t.val(loss).at(0), t.grad(zi)};
}

PairLossValue vicreg_loss(const Tensor& za, const Tensor& zb, double lambda_inv, double mu_var,
                          double nu_cov) {
  Tape t;
  const int ai = t.push(za);
  const int bi = t.push(zb);
  const int loss = t.vicreg_node(ai, bi, lambda_inv, mu_var, nu_cov);
  t.backward(loss);
  return {t.val(loss).at(0), t.grad(ai), t.grad(bi)};
}

Tensor class_weights(const std::vector<int>& labels, int num_classes) {
  require(num_classes >= 1, "class_weights: need at least one class");
  require(!labels.empty(), "class_weights: empty label set");
  std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
  for (int l : labels) {
    require(l >= 0 && l < num_classes, "class_weights: label out of range");
    ++counts[static_cast<size_t>(l)];
  }
  Tensor w({num_classes});
  const double n = static_cast<double>(labels.size());
  for (int c = 0; c < num_classes; ++c) {
    require(counts[static_cast<size_t>(c)] > 0,
            "class_weights: class " + std::to_string(c) + " absent from labels");
    w.at(c) = n / (num_classes * static_cast<double>(counts[static_cast<size_t>(c)]));
  }
  double mean = 0.0;
  for (int c = 0; c < num_classes; ++c) mean += w.at(c);
  mean /= num_classes;
  for (int c = 0; c < num_classes; ++c) w.at(c) /= mean;
  return w;
}

LossValue weighted_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                 const Tensor& weights) {
  Tape t;
  const int li = t.push(logits);
  const int loss = t.wce_node(li, labels, weights);
  t.backward(loss);
  return {t.val(loss).at(0), t.grad(li)};
}

}  // namespace cimlite
