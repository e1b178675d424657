#pragma once

#include "cimlite/tensor.hpp"

namespace cimlite {

// Raw grouped-convolution kernels on NCHW doubles, stride 1, zero padding.
// Shared by the autodiff tape and the relevance-propagation rules (which run
// modified-weight forward/backward passes outside the tape).

struct ConvDims {
  int n, cin, h, w;     // input
  int cout, kh, kw;     // filter
  int groups, pad;
  int oh, ow;           // output

  static ConvDims make(const Tensor& input, const Tensor& weight, int groups, int pad);
};

void conv2d_forward(const Tensor& input, const Tensor& weight, const double* bias,
                    const ConvDims& d, Tensor& output);

// accumulates into grad_input (must be pre-sized and zeroed by the caller)
void conv2d_backward_data(const Tensor& grad_out, const Tensor& weight, const ConvDims& d,
                          Tensor& grad_input);

// accumulates into grad_weight / grad_bias
void conv2d_backward_weight(const Tensor& grad_out, const Tensor& input, const ConvDims& d,
                            Tensor& grad_weight, Tensor& grad_bias);

}  // namespace cimlite
