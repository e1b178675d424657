#include "cimlite/tape.hpp"

#include "cimlite/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace cimlite {

const Tensor Tape::empty_{};

int Tape::push(Tensor t) {
  values_.push_back(std::move(t));
  grads_.emplace_back();
  return static_cast<int>(values_.size()) - 1;
}

bool Tape::has_grad(int id) const { return !grads_[static_cast<size_t>(id)].data.empty(); }

const Tensor& Tape::grad(int id) const {
  const Tensor& g = grads_[static_cast<size_t>(id)];
  return g.data.empty() ? empty_ : g;
}

Tensor& Tape::grad_slot(int id) {
  Tensor& g = grads_[static_cast<size_t>(id)];
  if (g.data.empty()) g = Tensor::zeros(values_[static_cast<size_t>(id)].shape);
  return g;
}

void Tape::assert_finite(int id, const char* what) const {
  if (!val(id).all_finite())
    throw NumericError(std::string("non-finite values in ") + what);
}

int Tape::conv2d_grouped(int input, int weight, int bias, int groups, int stride,
                         int padding) {
  require(stride == 1, "conv2d_grouped: only stride 1 is supported");
  const Tensor& x = val(input);
  const Tensor& w = val(weight);
  const Tensor& b = val(bias);
  ConvDims d = ConvDims::make(x, w, groups, padding);
  require(b.rank() == 1 && b.dim(0) == d.cout, "conv2d_grouped: bias must have Cout entries");

  Tensor out;
  conv2d_forward(x, w, b.data.data(), d, out);
  int id = push(std::move(out));
  nodes_.push_back({[this, input, weight, bias, d, id]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    conv2d_backward_data(go, val(weight), d, grad_slot(input));
    conv2d_backward_weight(go, val(input), d, grad_slot(weight), grad_slot(bias));
  }});
  return id;
}

int Tape::depthwise_conv2d(int input, int weight, int bias, int padding) {
  const Tensor& x = val(input);
  const Tensor& w = val(weight);
  require(x.rank() == 4, "depthwise_conv2d: input must be rank 4");
  require(w.rank() == 4 && w.dim(1) == 1, "depthwise_conv2d: weight must be [C,1,kh,kw]");
  require(w.dim(0) == x.dim(1), "depthwise_conv2d: weight channels must match input");
  return conv2d_grouped(input, weight, bias, x.dim(1), 1, padding);
}

int Tape::batchnorm2d(int input, int gamma, int beta, BnStats* stats, Mode mode,
                      double eps, double momentum) {
  require(eps > 0.0, "batchnorm2d: eps must be positive");
  const Tensor& x = val(input);
  require(x.rank() == 4, "batchnorm2d: input must be rank 4");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Tensor& g = val(gamma);
  const Tensor& b = val(beta);
  require(g.rank() == 1 && g.dim(0) == c && b.rank() == 1 && b.dim(0) == c,
          "batchnorm2d: gamma/beta must have C entries");
  require(stats != nullptr && stats->initialized && stats->mean.dim(0) == c,
          "batchnorm2d: running stats missing or channel mismatch");

  const size_t plane = static_cast<size_t>(h) * w;
  const size_t chan_stride = static_cast<size_t>(c) * plane;
  const double m_count = static_cast<double>(n) * static_cast<double>(plane);

  Tensor mean({c}), invstd({c});
  if (mode == Mode::train) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* p = x.data.data() + ni * chan_stride + ci * plane;
        for (size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / m_count;
      double v = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* p = x.data.data() + ni * chan_stride + ci * plane;
        for (size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          v += d * d;
        }
      }
      v /= m_count;  // biased variance, used both for normalization and stats
      mean.at(ci) = mu;
      invstd.at(ci) = 1.0 / std::sqrt(v + eps);
      stats->mean.at(ci) = (1.0 - momentum) * stats->mean.at(ci) + momentum * mu;
      stats->var.at(ci) = (1.0 - momentum) * stats->var.at(ci) + momentum * v;
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean.at(ci) = stats->mean.at(ci);
      invstd.at(ci) = 1.0 / std::sqrt(stats->var.at(ci) + eps);
    }
  }

  Tensor out(x.shape);
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* p = x.data.data() + ni * chan_stride + ci * plane;
      double* o = out.data.data() + ni * chan_stride + ci * plane;
      const double mu = mean.at(ci), is = invstd.at(ci);
      const double gc = g.at(ci), bc = b.at(ci);
      for (size_t i = 0; i < plane; ++i) o[i] = (p[i] - mu) * is * gc + bc;
    }
  }
  int id = push(std::move(out));

  const bool train = mode == Mode::train;
  nodes_.push_back({[this, input, gamma, beta, mean, invstd, train, id, n, c, plane,
                     chan_stride, m_count]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& x = val(input);
    const Tensor& g = val(gamma);
    Tensor& gx = grad_slot(input);
    Tensor& gg = grad_slot(gamma);
    Tensor& gb = grad_slot(beta);
    for (int ci = 0; ci < c; ++ci) {
      const double mu = mean.at(ci), is = invstd.at(ci), gc = g.at(ci);
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* gp = go.data.data() + ni * chan_stride + ci * plane;
        const double* xp = x.data.data() + ni * chan_stride + ci * plane;
        for (size_t i = 0; i < plane; ++i) {
          sum_go += gp[i];
          sum_go_xhat += gp[i] * (xp[i] - mu) * is;
        }
      }
      gg.at(ci) += sum_go_xhat;
      gb.at(ci) += sum_go;
      if (train) {
        const double mean_dgo = sum_go / m_count;
        const double mean_dgo_xhat = sum_go_xhat / m_count;
        for (int ni = 0; ni < n; ++ni) {
          const double* gp = go.data.data() + ni * chan_stride + ci * plane;
          const double* xp = x.data.data() + ni * chan_stride + ci * plane;
          double* gxp = gx.data.data() + ni * chan_stride + ci * plane;
          for (size_t i = 0; i < plane; ++i) {
            const double xhat = (xp[i] - mu) * is;
            gxp[i] += gc * is * (gp[i] - mean_dgo - xhat * mean_dgo_xhat);
          }
        }
      } else {
        for (int ni = 0; ni < n; ++ni) {
          const double* gp = go.data.data() + ni * chan_stride + ci * plane;
          double* gxp = gx.data.data() + ni * chan_stride + ci * plane;
          for (size_t i = 0; i < plane; ++i) gxp[i] += gp[i] * gc * is;
        }
      }
    }
  }});
  return id;
}

int Tape::relu(int x) {
  Tensor out = val(x);
  for (auto& e : out.data) e = e > 0.0 ? e : 0.0;
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& v = val(x);
    Tensor& gx = grad_slot(x);
    for (size_t i = 0; i < gx.data.size(); ++i)
      if (v.data[i] > 0.0) gx.data[i] += go.data[i];
  }});
  return id;
}

int Tape::sigmoid(int x) {
  Tensor out = val(x);
  for (auto& e : out.data) {
    if (e >= 0.0) {
      e = 1.0 / (1.0 + std::exp(-e));
    } else {
      const double t = std::exp(e);
      e = t / (1.0 + t);
    }
  }
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& y = val(id);
    Tensor& gx = grad_slot(x);
    for (size_t i = 0; i < gx.data.size(); ++i)
      gx.data[i] += go.data[i] * y.data[i] * (1.0 - y.data[i]);
  }});
  return id;
}

int Tape::global_avg_pool(int x) {
  const Tensor& v = val(x);
  require(v.rank() == 4, "global_avg_pool: input must be rank 4");
  const int n = v.dim(0), c = v.dim(1);
  const size_t plane = static_cast<size_t>(v.dim(2)) * v.dim(3);
  Tensor out({n, c});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* p = v.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      double s = 0.0;
      for (size_t i = 0; i < plane; ++i) s += p[i];
      out.at(ni, ci) = s / static_cast<double>(plane);
    }
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id, n, c, plane]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    Tensor& gx = grad_slot(x);
    const double inv = 1.0 / static_cast<double>(plane);
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        double* p = gx.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
        const double g = go.at(ni, ci) * inv;
        for (size_t i = 0; i < plane; ++i) p[i] += g;
      }
  }});
  return id;
}

int Tape::linear(int x, int weight, int bias) {
  const Tensor& v = val(x);
  const Tensor& w = val(weight);
  const Tensor& b = val(bias);
  require(v.rank() == 2, "linear: input must be rank 2");
  require(w.rank() == 2 && w.dim(1) == v.dim(1), "linear: weight must be [Dout,Din]");
  require(b.rank() == 1 && b.dim(0) == w.dim(0), "linear: bias must have Dout entries");
  const int n = v.dim(0), din = v.dim(1), dout = w.dim(0);
  Tensor out({n, dout});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < dout; ++o) {
      double s = b.at(o);
      const double* xr = v.data.data() + static_cast<size_t>(i) * din;
      const double* wr = w.data.data() + static_cast<size_t>(o) * din;
      for (int k = 0; k < din; ++k) s += xr[k] * wr[k];
      out.at(i, o) = s;
    }
  int id = push(std::move(out));
  nodes_.push_back({[this, x, weight, bias, id, n, din, dout]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& v = val(x);
    const Tensor& w = val(weight);
    Tensor& gx = grad_slot(x);
    Tensor& gw = grad_slot(weight);
    Tensor& gb = grad_slot(bias);
    for (int i = 0; i < n; ++i) {
      const double* gr = go.data.data() + static_cast<size_t>(i) * dout;
      const double* xr = v.data.data() + static_cast<size_t>(i) * din;
      double* gxr = gx.data.data() + static_cast<size_t>(i) * din;
      for (int o = 0; o < dout; ++o) {
        const double g = gr[o];
        if (g == 0.0) continue;
        const double* wr = w.data.data() + static_cast<size_t>(o) * din;
        double* gwr = gw.data.data() + static_cast<size_t>(o) * din;
        for (int k = 0; k < din; ++k) {
          gxr[k] += g * wr[k];
          gwr[k] += g * xr[k];
        }
        gb.at(o) += g;
      }
    }
  }});
  return id;
}

int Tape::add(int a, int b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  require(va.same_shape(vb), "add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  Tensor out = va;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
  int id = push(std::move(out));
  nodes_.push_back({[this, a, b, id]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    Tensor& ga = grad_slot(a);
    Tensor& gb = grad_slot(b);
    for (size_t i = 0; i < go.data.size(); ++i) {
      ga.data[i] += go.data[i];
      gb.data[i] += go.data[i];
    }
  }});
  return id;
}

int Tape::scale_channels(int features, int gates) {
  const Tensor& f = val(features);
  const Tensor& g = val(gates);
  require(f.rank() == 4, "scale_channels: features must be rank 4");
  require(g.rank() == 2 && g.dim(0) == f.dim(0) && g.dim(1) == f.dim(1),
          "scale_channels: gates must be [N,C]");
  const int n = f.dim(0), c = f.dim(1);
  const size_t plane = static_cast<size_t>(f.dim(2)) * f.dim(3);
  Tensor out(f.shape);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double gv = g.at(ni, ci);
      const double* p = f.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      double* o = out.data.data() + (static_cast<size_t>(ni) * c + ci) * plane;
      for (size_t i = 0; i < plane; ++i) o[i] = p[i] * gv;
    }
  int id = push(std::move(out));
  nodes_.push_back({[this, features, gates, id, n, c, plane]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& f = val(features);
    const Tensor& g = val(gates);
    Tensor& gf = grad_slot(features);
    Tensor& gg = grad_slot(gates);
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        const size_t off = (static_cast<size_t>(ni) * c + ci) * plane;
        const double gv = g.at(ni, ci);
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) {
          gf.data[off + i] += go.data[off + i] * gv;
          acc += go.data[off + i] * f.data[off + i];
        }
        gg.at(ni, ci) += acc;
      }
  }});
  return id;
}

int Tape::reshape(int x, std::vector<int> shape) {
  const Tensor& v = val(x);
  require(Tensor::numel_of(shape) == v.numel(), "reshape: element count mismatch");
  Tensor out;
  out.shape = shape;
  out.data = v.data;
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    Tensor& gx = grad_slot(x);
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go.data[i];
  }});
  return id;
}

int Tape::scale(int x, double k) {
  Tensor out = val(x);
  for (auto& e : out.data) e *= k;
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id, k]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    Tensor& gx = grad_slot(x);
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += k * go.data[i];
  }});
  return id;
}

int Tape::sum_all(int x) {
  Tensor out({1});
  out.at(0) = val(x).sum();
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id]() {
    if (!has_grad(id)) return;
    const double g = grads_[static_cast<size_t>(id)].at(0);
    Tensor& gx = grad_slot(x);
    for (auto& e : gx.data) e += g;
  }});
  return id;
}

int Tape::slice_rows(int x, int row0, int row1) {
  const Tensor& v = val(x);
  require(v.rank() == 2, "slice_rows: input must be rank 2");
  require(0 <= row0 && row0 < row1 && row1 <= v.dim(0), "slice_rows: bad row range");
  const int d = v.dim(1);
  Tensor out({row1 - row0, d});
  std::copy(v.data.begin() + static_cast<size_t>(row0) * d,
            v.data.begin() + static_cast<size_t>(row1) * d, out.data.begin());
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id, row0, d]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    Tensor& gx = grad_slot(x);
    for (size_t i = 0; i < go.data.size(); ++i)
      gx.data[static_cast<size_t>(row0) * d + i] += go.data[i];
  }});
  return id;
}

int Tape::l2_normalize_rows(int x) {
  const Tensor& v = val(x);
  require(v.rank() == 2, "l2_normalize_rows: input must be rank 2");
  const int n = v.dim(0), d = v.dim(1);
  Tensor out(v.shape);
  Tensor norms({n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += v.at(i, j) * v.at(i, j);
    const double r = std::sqrt(s);
    if (r < 1e-12)
      throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms.at(i) = r;
    for (int j = 0; j < d; ++j) out.at(i, j) = v.at(i, j) / r;
  }
  int id = push(std::move(out));
  nodes_.push_back({[this, x, id, norms, n, d]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& y = val(id);
    Tensor& gx = grad_slot(x);
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += y.at(i, j) * go.at(i, j);
      const double r = norms.at(i);
      for (int j = 0; j < d; ++j) gx.at(i, j) += (go.at(i, j) - y.at(i, j) * dot) / r;
    }
  }});
  return id;
}

int Tape::matmul_nt(int a, int b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  require(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(1),
          "matmul_nt: inner dimensions must match");
  const int n = va.dim(0), m = vb.dim(0), k = va.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      const double* ar = va.data.data() + static_cast<size_t>(i) * k;
      const double* br = vb.data.data() + static_cast<size_t>(j) * k;
      for (int t = 0; t < k; ++t) s += ar[t] * br[t];
      out.at(i, j) = s;
    }
  int id = push(std::move(out));
  nodes_.push_back({[this, a, b, id, n, m, k]() {
    if (!has_grad(id)) return;
    const Tensor& go = grads_[static_cast<size_t>(id)];
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    Tensor& ga = grad_slot(a);
    Tensor& gb = grad_slot(b);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const double g = go.at(i, j);
        if (g == 0.0) continue;
        for (int t = 0; t < k; ++t) {
          ga.at(i, t) += g * vb.at(j, t);
          gb.at(j, t) += g * va.at(i, t);
        }
      }
  }});
  return id;
}

int Tape::ntxent_from_sims(int sims) {
  const Tensor& s = val(sims);
  require(s.rank() == 2 && s.dim(0) == s.dim(1), "ntxent_from_sims: matrix must be square");
  const int n = s.dim(0);
  require(n >= 4 && n % 2 == 0, "ntxent_from_sims: need an even number of rows >= 4");
  const int half = n / 2;

  // probabilities over the 2B-1 candidates of each anchor, self masked out
  Tensor probs({n, n});
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int pos = i < half ? i + half : i - half;
    double mx = -1e300;
    for (int j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, s.at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j)
      if (j != i) z += std::exp(s.at(i, j) - mx);
    const double lse = mx + std::log(z);
    loss += lse - s.at(i, pos);
    for (int j = 0; j < n; ++j)
      probs.at(i, j) = j == i ? 0.0 : std::exp(s.at(i, j) - lse);
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("ntxent_from_sims: non-finite loss");

  Tensor out({1});
  out.at(0) = loss;
  int id = push(std::move(out));
  nodes_.push_back({[this, sims, id, probs, n, half]() {
    if (!has_grad(id)) return;
    const double g = grads_[static_cast<size_t>(id)].at(0) / static_cast<double>(n);
    Tensor& gs = grad_slot(sims);
    for (int i = 0; i < n; ++i) {
      const int pos = i < half ? i + half : i - half;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        gs.at(i, j) += g * (probs.at(i, j) - (j == pos ? 1.0 : 0.0));
      }
    }
  }});
  return id;
}

int Tape::vicreg_node(int za, int zb, double lambda_inv, double mu_var, double nu_cov,
                      double std_eps) {
  const Tensor& a = val(za);
  const Tensor& b = val(zb);
  require(a.rank() == 2 && b.rank() == 2 && a.same_shape(b),
          "vicreg: embeddings must be rank-2 and same shape");
  const int bs = a.dim(0), d = a.dim(1);
  if (bs < 2) throw std::invalid_argument("vicreg: batch size must be >= 2");

  // invariance: mean squared difference over all entries
  double inv = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double df = a.data[i] - b.data[i];
    inv += df * df;
  }
  inv /= static_cast<double>(bs) * d;

  auto center = [bs, d](const Tensor& z, Tensor& zc, Tensor& mean) {
    zc = z;
    mean = Tensor({d});
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int i = 0; i < bs; ++i) s += z.at(i, j);
      mean.at(j) = s / bs;
      for (int i = 0; i < bs; ++i) zc.at(i, j) -= mean.at(j);
    }
  };
  Tensor ac, bc, am, bm;
  center(a, ac, am);
  center(b, bc, bm);

  auto branch_stats = [bs, d, std_eps](const Tensor& zc, Tensor& stds, Tensor& cov,
                                       double& var_term, double& cov_term) {
    stds = Tensor({d});
    var_term = 0.0;
    for (int j = 0; j < d; ++j) {
      double v = 0.0;
      for (int i = 0; i < bs; ++i) v += zc.at(i, j) * zc.at(i, j);
      v /= (bs - 1);
      stds.at(j) = std::sqrt(v + std_eps);
      var_term += std::max(0.0, 1.0 - stds.at(j));
    }
    var_term /= d;
    cov = Tensor({d, d});
    cov_term = 0.0;
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k) {
        double s = 0.0;
        for (int i = 0; i < bs; ++i) s += zc.at(i, j) * zc.at(i, k);
        s /= (bs - 1);
        cov.at(j, k) = s;
        if (j != k) cov_term += s * s;
      }
    cov_term /= d;
  };
  Tensor astd, bstd, acov, bcov;
  double avar, bvar, acv, bcv;
  branch_stats(ac, astd, acov, avar, acv);
  branch_stats(bc, bstd, bcov, bvar, bcv);

  Tensor out({1});
  out.at(0) = lambda_inv * inv + mu_var * (avar + bvar) + nu_cov * (acv + bcv);
  int id = push(std::move(out));

  nodes_.push_back({[this, za, zb, id, lambda_inv, mu_var, nu_cov, bs, d, ac, bc, astd,
                     bstd, acov, bcov]() {
    if (!has_grad(id)) return;
    const double g = grads_[static_cast<size_t>(id)].at(0);
    const Tensor& a = val(za);
    const Tensor& b = val(zb);
    Tensor& ga = grad_slot(za);
    Tensor& gb = grad_slot(zb);

    const double inv_coef = g * lambda_inv * 2.0 / (static_cast<double>(bs) * d);
    for (int i = 0; i < bs; ++i)
      for (int j = 0; j < d; ++j) {
        const double df = a.at(i, j) - b.at(i, j);
        ga.at(i, j) += inv_coef * df;
        gb.at(i, j) -= inv_coef * df;
      }

    auto branch_back = [g, mu_var, nu_cov, bs, d](const Tensor& zc, const Tensor& stds,
                                                  const Tensor& cov, Tensor& gz) {
      // hinge on per-dimension std; the batch-mean dependence cancels because
      // the centered columns sum to zero
      for (int j = 0; j < d; ++j) {
        if (stds.at(j) >= 1.0) continue;
        const double coef = -g * mu_var / (d * (bs - 1.0) * stds.at(j));
        for (int i = 0; i < bs; ++i) gz.at(i, j) += coef * zc.at(i, j);
      }
      const double ccoef = g * nu_cov * 4.0 / (static_cast<double>(d) * (bs - 1.0));
      for (int i = 0; i < bs; ++i)
        for (int j = 0; j < d; ++j) {
          double s = 0.0;
          for (int k = 0; k < d; ++k)
            if (k != j) s += zc.at(i, k) * cov.at(k, j);
          gz.at(i, j) += ccoef * s;
        }
    };
    branch_back(ac, astd, acov, ga);
    branch_back(bc, bstd, bcov, gb);
  }});
  return id;
}

int Tape::wce_node(int logits, std::vector<int> labels, Tensor class_weights) {
  const Tensor& lg = val(logits);
  require(lg.rank() == 2, "wce: logits must be rank 2");
  const int n = lg.dim(0), k = lg.dim(1);
  require(static_cast<int>(labels.size()) == n, "wce: one label per row required");
  require(class_weights.rank() == 1 && class_weights.dim(0) == k,
          "wce: class weights must have K entries");
  for (int y : labels)
    require(y >= 0 && y < k, "wce: label out of range");
  if (!lg.all_finite()) throw NumericError("wce: non-finite logits");

  Tensor probs({n, k});
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = lg.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, lg.at(i, j));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(lg.at(i, j) - mx);
    const double lse = mx + std::log(z);
    loss += class_weights.at(labels[static_cast<size_t>(i)]) * (lse - lg.at(i, labels[static_cast<size_t>(i)]));
    for (int j = 0; j < k; ++j) probs.at(i, j) = std::exp(lg.at(i, j) - lse);
  }
  loss /= n;

  Tensor out({1});
  out.at(0) = loss;
  int id = push(std::move(out));
  nodes_.push_back({[this, logits, id, probs, labels = std::move(labels),
                     class_weights = std::move(class_weights), n, k]() {
    if (!has_grad(id)) return;
    const double g = grads_[static_cast<size_t>(id)].at(0) / n;
    Tensor& gl = grad_slot(logits);
    for (int i = 0; i < n; ++i) {
      const int y = labels[static_cast<size_t>(i)];
      const double w = class_weights.at(y);
      for (int j = 0; j < k; ++j)
        gl.at(i, j) += g * w * (probs.at(i, j) - (j == y ? 1.0 : 0.0));
    }
  }});
  return id;
}

void Tape::backward(int id) {
  require(val(id).numel() == 1, "backward: output must be scalar");
  grad_slot(id).at(0) = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
}

double grad_check(const std::function<int(Tape&, int)>& build, const Tensor& point,
                  double eps) {
  return grad_check_many(
      [&build](Tape& t, const std::vector<int>& ids) { return build(t, ids[0]); }, {point},
      eps);
}

double grad_check_many(const std::function<int(Tape&, const std::vector<int>&)>& build,
                       const std::vector<Tensor>& points, double eps) {
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<int> ids;
    ids.reserve(points.size());
    for (const auto& p : points) ids.push_back(t.push(p));
    int loss = build(t, ids);
    require(t.val(loss).numel() == 1, "grad_check: function must produce a scalar");
    t.backward(loss);
    for (int id : ids) {
      Tensor g = t.has_grad(id) ? t.grad(id) : Tensor::zeros(t.val(id).shape);
      if (!g.all_finite()) throw NumericError("grad_check: non-finite gradient");
      analytic.push_back(std::move(g));
    }
  }

  auto eval_at = [&build, &points](size_t which, int64_t coord, double value) {
    Tape t;
    std::vector<int> ids;
    for (size_t p = 0; p < points.size(); ++p) {
      Tensor tp = points[p];
      if (p == which) tp.data[static_cast<size_t>(coord)] = value;
      ids.push_back(t.push(std::move(tp)));
    }
    return t.val(build(t, ids)).at(0);
  };

  double max_err = 0.0;
  for (size_t p = 0; p < points.size(); ++p) {
    for (int64_t i = 0; i < points[p].numel(); ++i) {
      const double x0 = points[p].data[static_cast<size_t>(i)];
      const double fp = eval_at(p, i, x0 + eps);
      const double fm = eval_at(p, i, x0 - eps);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p].data[static_cast<size_t>(i)];
      const double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace cimlite
