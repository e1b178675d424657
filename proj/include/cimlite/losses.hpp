#pragma once

#include <vector>

#include "cimlite/tensor.hpp"

namespace cimlite {

struct LossValue {
  double loss = 0.0;
  Tensor grad;  // d loss / d input
};

struct PairLossValue {
  double loss = 0.0;
  Tensor grad_a;
  Tensor grad_b;
};

// z holds both views stacked: rows [0,B) are view A, rows [B,2B) are view B
LossValue nt_xent_loss(const Tensor& z, double temperature = 0.2);

PairLossValue vicreg_loss(const Tensor& za, const Tensor& zb, double lambda_inv = 25.0,
                          double mu_var = 25.0, double nu_cov = 1.0);

// w_c = N / (K * N_c), rescaled to mean 1; every class in [0, num_classes) must occur
Tensor class_weights(const std::vector<int>& labels, int num_classes);

LossValue weighted_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                 const Tensor& weights);

}  // namespace cimlite
