#pragma once

#include <functional>
#include <vector>

#include "cimlite/conv.hpp"
#include "cimlite/tensor.hpp"

namespace cimlite {

enum class Mode { train, eval };

// Per-layer running statistics for batch normalization, owned by the model.
struct BnStats {
  Tensor mean, var;
  bool initialized = false;

  static BnStats make(int channels) {
    BnStats s;
    s.mean = Tensor::zeros({channels});
    s.var = Tensor::full({channels}, 1.0);
    s.initialized = true;
    return s;
  }
};

// Reverse-mode tape. Ops append nodes in execution order; backward() visits
// them once in reverse. Tensor ids index into the tape's value/grad arrays.
class Tape {
 public:
  int push(Tensor t);
  int size() const { return static_cast<int>(values_.size()); }

  const Tensor& val(int id) const { return values_[static_cast<size_t>(id)]; }
  const Tensor& grad(int id) const;
  bool has_grad(int id) const;

  int conv2d_grouped(int input, int weight, int bias, int groups, int stride, int padding);
  int depthwise_conv2d(int input, int weight, int bias, int padding = 1);
  int batchnorm2d(int input, int gamma, int beta, BnStats* stats, Mode mode,
                  double eps = 1e-5, double momentum = 0.1);
  int relu(int x);
  int sigmoid(int x);
  int global_avg_pool(int x);
  int linear(int x, int weight, int bias);
  int add(int a, int b);
  int scale_channels(int features, int gates);
  int reshape(int x, std::vector<int> shape);
  int scale(int x, double k);
  int sum_all(int x);
  int slice_rows(int x, int row0, int row1);
  int l2_normalize_rows(int x);
  int matmul_nt(int a, int b);

  // NT-Xent cross-entropy over a [2B,2B] similarity matrix (already divided
  // by the temperature); rows i and i+B are positive pairs, self excluded.
  int ntxent_from_sims(int sims);

  int vicreg_node(int za, int zb, double lambda_inv, double mu_var, double nu_cov,
                  double std_eps = 1e-4);

  int wce_node(int logits, std::vector<int> labels, Tensor class_weights);

  // Seeds d(out)/d(out)=1 for a scalar output and propagates to all leaves.
  void backward(int id);

  void assert_finite(int id, const char* what) const;

 private:
  struct Node {
    std::function<void()> back;
  };

  Tensor& grad_slot(int id);

  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<Node> nodes_;
  static const Tensor empty_;
};

// Central-difference check of a scalar function built from tape primitives.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
double grad_check(const std::function<int(Tape&, int)>& build, const Tensor& point,
                  double eps = 1e-5);

// Same, over several input tensors at once (e.g. all model parameters).
double grad_check_many(const std::function<int(Tape&, const std::vector<int>&)>& build,
                       const std::vector<Tensor>& points, double eps = 1e-5);

}  // namespace cimlite
