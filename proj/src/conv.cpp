#include "cimlite/conv.hpp"

#include <algorithm>
#include <string>

namespace cimlite {

ConvDims ConvDims::make(const Tensor& input, const Tensor& weight, int groups, int pad) {
  require(input.rank() == 4, "conv: input must be rank 4, got " + input.shape_str());
  require(weight.rank() == 4, "conv: weight must be rank 4, got " + weight.shape_str());
  ConvDims d{};
  d.n = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.groups = groups;
  d.pad = pad;
  require(groups >= 1, "conv: groups must be >= 1");
  require(d.cin % groups == 0, "conv: groups must divide input channels");
  require(d.cout % groups == 0, "conv: groups must divide output channels");
  require(weight.dim(1) == d.cin / groups,
          "conv: weight in-channel extent mismatch, got " + weight.shape_str());
  require(pad == 0 || (pad * 2 == d.kh - 1 && pad * 2 == d.kw - 1),
          "conv: padding must be 0 or (k-1)/2");
  d.oh = d.h + 2 * pad - d.kh + 1;
  d.ow = d.w + 2 * pad - d.kw + 1;
  require(d.oh >= 1 && d.ow >= 1, "conv: kernel larger than padded input");
  return d;
}

void conv2d_forward(const Tensor& input, const Tensor& weight, const double* bias,
                    const ConvDims& d, Tensor& output) {
  output = Tensor({d.n, d.cout, d.oh, d.ow});
  const int cing = d.cin / d.groups;
  const int coutg = d.cout / d.groups;
  const double* in = input.data.data();
  const double* wt = weight.data.data();
  double* out = output.data.data();
  const size_t in_ch = static_cast<size_t>(d.h) * d.w;
  const size_t out_ch = static_cast<size_t>(d.oh) * d.ow;

  for (int n = 0; n < d.n; ++n) {
    for (int oc = 0; oc < d.cout; ++oc) {
      const int g = oc / coutg;
      double* o = out + (static_cast<size_t>(n) * d.cout + oc) * out_ch;
      const double b = bias ? bias[oc] : 0.0;
      for (size_t i = 0; i < out_ch; ++i) o[i] = b;
      for (int icg = 0; icg < cing; ++icg) {
        const int ic = g * cing + icg;
        const double* x = in + (static_cast<size_t>(n) * d.cin + ic) * in_ch;
        const double* wk = wt + ((static_cast<size_t>(oc) * cing + icg) * d.kh) * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          for (int kw = 0; kw < d.kw; ++kw) {
            const double wv = wk[kh * d.kw + kw];
            if (wv == 0.0) continue;
            const int ow_lo = std::max(0, d.pad - kw);
            const int ow_hi = std::min(d.ow, d.w + d.pad - kw);
            for (int oh = 0; oh < d.oh; ++oh) {
              const int ih = oh + kh - d.pad;
              if (ih < 0 || ih >= d.h) continue;
              double* orow = o + static_cast<size_t>(oh) * d.ow;
              const double* xrow = x + static_cast<size_t>(ih) * d.w + (kw - d.pad);
              for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xrow[ow];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_data(const Tensor& grad_out, const Tensor& weight, const ConvDims& d,
                          Tensor& grad_input) {
  const int cing = d.cin / d.groups;
  const int coutg = d.cout / d.groups;
  const double* go = grad_out.data.data();
  const double* wt = weight.data.data();
  double* gi = grad_input.data.data();
  const size_t in_ch = static_cast<size_t>(d.h) * d.w;
  const size_t out_ch = static_cast<size_t>(d.oh) * d.ow;

  for (int n = 0; n < d.n; ++n) {
    for (int oc = 0; oc < d.cout; ++oc) {
      const int g = oc / coutg;
      const double* gorow0 = go + (static_cast<size_t>(n) * d.cout + oc) * out_ch;
      for (int icg = 0; icg < cing; ++icg) {
        const int ic = g * cing + icg;
        double* gx = gi + (static_cast<size_t>(n) * d.cin + ic) * in_ch;
        const double* wk = wt + ((static_cast<size_t>(oc) * cing + icg) * d.kh) * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          for (int kw = 0; kw < d.kw; ++kw) {
            const double wv = wk[kh * d.kw + kw];
            if (wv == 0.0) continue;
            const int ow_lo = std::max(0, d.pad - kw);
            const int ow_hi = std::min(d.ow, d.w + d.pad - kw);
            for (int oh = 0; oh < d.oh; ++oh) {
              const int ih = oh + kh - d.pad;
              if (ih < 0 || ih >= d.h) continue;
              const double* grow = gorow0 + static_cast<size_t>(oh) * d.ow;
              double* xrow = gx + static_cast<size_t>(ih) * d.w + (kw - d.pad);
              for (int ow = ow_lo; ow < ow_hi; ++ow) xrow[ow] += wv * grow[ow];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const Tensor& grad_out, const Tensor& input, const ConvDims& d,
                            Tensor& grad_weight, Tensor& grad_bias) {
  const int cing = d.cin / d.groups;
  const int coutg = d.cout / d.groups;
  const double* go = grad_out.data.data();
  const double* in = input.data.data();
  double* gw = grad_weight.data.data();
  double* gb = grad_bias.data.data();
  const size_t in_ch = static_cast<size_t>(d.h) * d.w;
  const size_t out_ch = static_cast<size_t>(d.oh) * d.ow;

  for (int n = 0; n < d.n; ++n) {
    for (int oc = 0; oc < d.cout; ++oc) {
      const int g = oc / coutg;
      const double* gorow0 = go + (static_cast<size_t>(n) * d.cout + oc) * out_ch;
      double bsum = 0.0;
      for (size_t i = 0; i < out_ch; ++i) bsum += gorow0[i];
      gb[oc] += bsum;
      for (int icg = 0; icg < cing; ++icg) {
        const int ic = g * cing + icg;
        const double* x = in + (static_cast<size_t>(n) * d.cin + ic) * in_ch;
        double* wk = gw + ((static_cast<size_t>(oc) * cing + icg) * d.kh) * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          for (int kw = 0; kw < d.kw; ++kw) {
            const int ow_lo = std::max(0, d.pad - kw);
            const int ow_hi = std::min(d.ow, d.w + d.pad - kw);
            double acc = 0.0;
            for (int oh = 0; oh < d.oh; ++oh) {
              const int ih = oh + kh - d.pad;
              if (ih < 0 || ih >= d.h) continue;
              const double* grow = gorow0 + static_cast<size_t>(oh) * d.ow;
              const double* xrow = x + static_cast<size_t>(ih) * d.w + (kw - d.pad);
              for (int ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * xrow[ow];
            }
            wk[kh * d.kw + kw] += acc;
          }
        }
      }
    }
  }
}

}  // namespace cimlite
