#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gramclust/stylefeat.hpp"
#include "gramclust/tensor.hpp"

namespace gramclust {

/// Fixed architecture: three 3x3 same-padding convs (C_in -> 8 -> 16 -> 32),
/// each followed by ReLU, then global average pooling and a linear head.
/// Layer ids 1..3 name the post-ReLU conv outputs.
inline constexpr std::array<std::size_t, 3> kConvChannels = {8, 16, 32};
inline constexpr int kNumConvLayers = 3;

template <typename Real>
struct NetParamsT {
  std::size_t in_channels = 3;
  std::size_t n_classes = 2;
  std::array<std::vector<Real>, 3> conv_w;  // [C_out, C_in, 3, 3] flattened
  std::array<std::vector<Real>, 3> conv_b;  // [C_out]
  std::vector<Real> fc_w;                   // [K, 32]
  std::vector<Real> fc_b;                   // [K]

  static std::size_t conv_in_channels(std::size_t layer, std::size_t in_ch) {
    return layer == 0 ? in_ch : kConvChannels[layer - 1];
  }

  void resize(std::size_t in_ch, std::size_t k) {
    in_channels = in_ch;
    n_classes = k;
    for (std::size_t l = 0; l < 3; ++l) {
      conv_w[l].assign(kConvChannels[l] * conv_in_channels(l, in_ch) * 9, Real(0));
      conv_b[l].assign(kConvChannels[l], Real(0));
    }
    fc_w.assign(k * kConvChannels[2], Real(0));
    fc_b.assign(k, Real(0));
  }

  void fill(Real v) {
    for (auto& w : conv_w) std::fill(w.begin(), w.end(), v);
    for (auto& b : conv_b) std::fill(b.begin(), b.end(), v);
    std::fill(fc_w.begin(), fc_w.end(), v);
    std::fill(fc_b.begin(), fc_b.end(), v);
  }

  std::size_t param_count() const {
    std::size_t n = fc_w.size() + fc_b.size();
    for (const auto& w : conv_w) n += w.size();
    for (const auto& b : conv_b) n += b.size();
    return n;
  }

  /// Visit every parameter array in a fixed order.
  template <typename Fn>
  void for_each_array(Fn&& fn) {
    for (std::size_t l = 0; l < 3; ++l) {
      fn("conv" + std::to_string(l + 1) + "_w", conv_w[l]);
      fn("conv" + std::to_string(l + 1) + "_b", conv_b[l]);
    }
    fn(std::string("fc_w"), fc_w);
    fn(std::string("fc_b"), fc_b);
  }

  template <typename Fn>
  void for_each_array(Fn&& fn) const {
    for (std::size_t l = 0; l < 3; ++l) {
      fn("conv" + std::to_string(l + 1) + "_w", conv_w[l]);
      fn("conv" + std::to_string(l + 1) + "_b", conv_b[l]);
    }
    fn(std::string("fc_w"), fc_w);
    fn(std::string("fc_b"), fc_b);
  }
};

using NetParams = NetParamsT<float>;

/// Post-ReLU activations and pooled/logit buffers for one image.
template <typename Real>
struct NetActsT {
  std::array<std::vector<Real>, 3> conv_out;  // [C_l, H, W] flattened
  std::vector<Real> pooled;                   // [32]
  std::vector<Real> logits;                   // [K]
};

using NetActs = NetActsT<float>;

namespace netmath {

// out[co, h, w] = b[co] + sum_{ci, dy, dx} w[co, ci, dy, dx] * in[ci, h+dy-1, w+dx-1]
// with zero padding, 3x3 kernel, stride 1.
// Nine zero-padded shifted copies of each channel: dst[c*9 + t][y*w + x] =
// src[c][y+oy][x+ox] with t = (oy+1)*3 + (ox+1). Turns the 3x3 convolution
// into long contiguous axpy/dot loops over whole images.
template <typename Real>
void shift_copies(const Real* src, std::size_t c, std::size_t h, std::size_t w, Real* dst) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const Real* x = src + ci * hw;
    for (int oy = -1; oy <= 1; ++oy) {
      for (int ox = -1; ox <= 1; ++ox) {
        const std::size_t t = static_cast<std::size_t>((oy + 1) * 3 + (ox + 1));
        Real* d = dst + (ci * 9 + t) * hw;
        const std::size_t y0 = oy < 0 ? 1 : 0;
        const std::size_t y1 = oy > 0 ? h - 1 : h;
        const std::size_t x0 = ox < 0 ? 1 : 0;
        const std::size_t x1 = ox > 0 ? w - 1 : w;
        if (y0 > 0) std::fill(d, d + w, Real(0));
        if (y1 < h) std::fill(d + (h - 1) * w, d + hw, Real(0));
        for (std::size_t y = y0; y < y1; ++y) {
          const Real* srow = x + (static_cast<std::size_t>(static_cast<int>(y) + oy)) * w;
          Real* drow = d + y * w;
          if (x0 > 0) drow[0] = Real(0);
          if (x1 < w) drow[w - 1] = Real(0);
          std::copy(srow + static_cast<int>(x0) + ox, srow + static_cast<int>(x1) + ox,
                    drow + x0);
        }
      }
    }
  }
}

// Dot product with a fixed lane array so the reduction vectorizes without
// reassociation flags.
template <typename Real>
Real dot_lanes(const Real* a, const Real* b, std::size_t n) {
  constexpr std::size_t L = 16;
  Real lanes[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t l = 0; l < L; ++l) lanes[l] += a[i + l] * b[i + l];
  Real tail = Real(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  Real sum = tail;
  for (std::size_t l = 0; l < L; ++l) sum += lanes[l];
  return sum;
}

template <typename Real>
std::vector<Real>& conv_scratch(std::size_t n) {
  thread_local std::vector<Real> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

template <typename Real>
void conv3x3_forward(const Real* in, std::size_t c_in, std::size_t h, std::size_t w,
                     const Real* wt, const Real* b, std::size_t c_out, Real* out) {
  const std::size_t hw = h * w;
  const std::size_t kk = c_in * 9;
  auto& shifted = conv_scratch<Real>(kk * hw);
  shift_copies(in, c_in, h, w, shifted.data());
  for (std::size_t co = 0; co < c_out; ++co)
    std::fill(out + co * hw, out + (co + 1) * hw, b[co]);
  // j outer keeps the three shifted rows in L1 while every output row stays
  // resident; pairs of output channels share the row loads. kk is a multiple
  // of 9.
  for (std::size_t j = 0; j < kk; j += 3) {
    const Real* __restrict s0 = shifted.data() + j * hw;
    const Real* __restrict s1 = s0 + hw;
    const Real* __restrict s2 = s1 + hw;
    std::size_t co = 0;
    for (; co + 2 <= c_out; co += 2) {
      const Real* wa = wt + co * kk;
      const Real* wb = wa + kk;
      const Real a0 = wa[j], a1 = wa[j + 1], a2 = wa[j + 2];
      const Real b0 = wb[j], b1 = wb[j + 1], b2 = wb[j + 2];
      Real* __restrict oa = out + co * hw;
      Real* __restrict ob = oa + hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const Real v0 = s0[i], v1 = s1[i], v2 = s2[i];
        oa[i] += a0 * v0 + a1 * v1 + a2 * v2;
        ob[i] += b0 * v0 + b1 * v1 + b2 * v2;
      }
    }
    if (co < c_out) {
      const Real* wrow = wt + co * kk;
      const Real k0 = wrow[j], k1 = wrow[j + 1], k2 = wrow[j + 2];
      Real* __restrict o = out + co * hw;
      for (std::size_t i = 0; i < hw; ++i)
        o[i] += k0 * s0[i] + k1 * s1[i] + k2 * s2[i];
    }
  }
}

// dw, db accumulate; din overwritten.
template <typename Real>
void conv3x3_backward(const Real* in, const Real* wt, const Real* dout,
                      std::size_t c_in, std::size_t h, std::size_t w, std::size_t c_out,
                      Real* dw, Real* db, Real* din) {
  const std::size_t hw = h * w;
  const std::size_t kk = c_in * 9;
  auto& buf = conv_scratch<Real>((kk + c_out * 9) * hw);
  Real* shifted = buf.data();
  Real* gshift = buf.data() + kk * hw;
  shift_copies(in, c_in, h, w, shifted);
  shift_copies(dout, c_out, h, w, gshift);

  for (std::size_t co = 0; co < c_out; ++co) {
    const Real* g = dout + co * hw;
    Real acc_b = Real(0);
    for (std::size_t i = 0; i < hw; ++i) acc_b += g[i];
    db[co] += acc_b;
  }

  // dw[co][j] = <dout[co], shifted[j]>, j outer so the shifted rows stay hot
  // and pairs of gradient channels share the row loads.
  for (std::size_t j = 0; j < kk; j += 3) {
    const Real* __restrict s0 = shifted + j * hw;
    const Real* __restrict s1 = s0 + hw;
    const Real* __restrict s2 = s1 + hw;
    std::size_t co = 0;
    for (; co + 2 <= c_out; co += 2) {
      const Real* __restrict ga = dout + co * hw;
      const Real* __restrict gb = ga + hw;
      constexpr std::size_t L = 16;
      Real a0[L] = {}, a1[L] = {}, a2[L] = {}, b0[L] = {}, b1[L] = {}, b2[L] = {};
      std::size_t i = 0;
      for (; i + L <= hw; i += L) {
        for (std::size_t l = 0; l < L; ++l) {
          const Real v0 = s0[i + l], v1 = s1[i + l], v2 = s2[i + l];
          const Real gav = ga[i + l];
          const Real gbv = gb[i + l];
          a0[l] += gav * v0;
          a1[l] += gav * v1;
          a2[l] += gav * v2;
          b0[l] += gbv * v0;
          b1[l] += gbv * v1;
          b2[l] += gbv * v2;
        }
      }
      Real ta0 = Real(0), ta1 = Real(0), ta2 = Real(0);
      Real tb0 = Real(0), tb1 = Real(0), tb2 = Real(0);
      for (; i < hw; ++i) {
        ta0 += ga[i] * s0[i];
        ta1 += ga[i] * s1[i];
        ta2 += ga[i] * s2[i];
        tb0 += gb[i] * s0[i];
        tb1 += gb[i] * s1[i];
        tb2 += gb[i] * s2[i];
      }
      for (std::size_t l = 0; l < L; ++l) {
        ta0 += a0[l];
        ta1 += a1[l];
        ta2 += a2[l];
        tb0 += b0[l];
        tb1 += b1[l];
        tb2 += b2[l];
      }
      Real* da = dw + co * kk;
      Real* dbr = da + kk;
      da[j] += ta0;
      da[j + 1] += ta1;
      da[j + 2] += ta2;
      dbr[j] += tb0;
      dbr[j + 1] += tb1;
      dbr[j + 2] += tb2;
    }
    if (co < c_out) {
      const Real* __restrict g = dout + co * hw;
      constexpr std::size_t L = 16;
      Real l0[L] = {}, l1[L] = {}, l2[L] = {};
      std::size_t i = 0;
      for (; i + L <= hw; i += L) {
        for (std::size_t l = 0; l < L; ++l) {
          const Real gv = g[i + l];
          l0[l] += gv * s0[i + l];
          l1[l] += gv * s1[i + l];
          l2[l] += gv * s2[i + l];
        }
      }
      Real t0 = Real(0), t1 = Real(0), t2 = Real(0);
      for (; i < hw; ++i) {
        t0 += g[i] * s0[i];
        t1 += g[i] * s1[i];
        t2 += g[i] * s2[i];
      }
      for (std::size_t l = 0; l < L; ++l) {
        t0 += l0[l];
        t1 += l1[l];
        t2 += l2[l];
      }
      Real* dwrow = dw + co * kk;
      dwrow[j] += t0;
      dwrow[j + 1] += t1;
      dwrow[j + 2] += t2;
    }
  }

  // din[ci][y][x] = sum over (co, oy, ox) of wt[co, ci, oy, ox] *
  // dout[co][y - oy][x - ox]; the shifted gradient copy at offset u supplies
  // the (-oy, -ox) term, which is kernel slot 8 - u.
  std::fill(din, din + c_in * hw, Real(0));
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t u = 0; u < 9; u += 3) {
      const Real* __restrict g0 = gshift + (co * 9 + u) * hw;
      const Real* __restrict g1 = g0 + hw;
      const Real* __restrict g2 = g1 + hw;
      std::size_t ci = 0;
      for (; ci + 2 <= c_in; ci += 2) {
        const Real* wa = wt + (co * c_in + ci) * 9;
        const Real* wb = wa + 9;
        const Real a0 = wa[8 - u], a1 = wa[7 - u], a2 = wa[6 - u];
        const Real b0 = wb[8 - u], b1 = wb[7 - u], b2 = wb[6 - u];
        Real* __restrict da = din + ci * hw;
        Real* __restrict db2 = da + hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const Real v0 = g0[i], v1 = g1[i], v2 = g2[i];
          da[i] += a0 * v0 + a1 * v1 + a2 * v2;
          db2[i] += b0 * v0 + b1 * v1 + b2 * v2;
        }
      }
      if (ci < c_in) {
        const Real* wrow = wt + (co * c_in + ci) * 9;
        const Real k0 = wrow[8 - u], k1 = wrow[7 - u], k2 = wrow[6 - u];
        Real* __restrict d = din + ci * hw;
        for (std::size_t i = 0; i < hw; ++i)
          d[i] += k0 * g0[i] + k1 * g1[i] + k2 * g2[i];
      }
    }
  }
}

template <typename Real>
void relu_forward(Real* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > Real(0) ? x[i] : Real(0);
}

// grad *= (post_act > 0)
template <typename Real>
void relu_backward(const Real* post_act, Real* grad, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(post_act[i] > Real(0))) grad[i] = Real(0);
}

template <typename Real>
void gap_forward(const Real* in, std::size_t c, std::size_t hw, Real* out) {
  const Real inv = Real(1) / static_cast<Real>(hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Real acc = Real(0);
    const Real* x = in + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += x[i];
    out[ch] = acc * inv;
  }
}

template <typename Real>
void gap_backward(const Real* dout, std::size_t c, std::size_t hw, Real* din) {
  const Real inv = Real(1) / static_cast<Real>(hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const Real g = dout[ch] * inv;
    Real* d = din + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) d[i] = g;
  }
}

template <typename Real>
void linear_forward(const Real* in, const Real* wt, const Real* b, std::size_t k,
                    std::size_t c, Real* out) {
  for (std::size_t j = 0; j < k; ++j) {
    Real acc = b[j];
    const Real* row = wt + j * c;
    for (std::size_t i = 0; i < c; ++i) acc += row[i] * in[i];
    out[j] = acc;
  }
}

// dw, db accumulate; din overwritten.
template <typename Real>
void linear_backward(const Real* in, const Real* wt, const Real* dout, std::size_t k,
                     std::size_t c, Real* dw, Real* db, Real* din) {
  std::fill(din, din + c, Real(0));
  for (std::size_t j = 0; j < k; ++j) {
    const Real g = dout[j];
    db[j] += g;
    const Real* row = wt + j * c;
    Real* dwr = dw + j * c;
    for (std::size_t i = 0; i < c; ++i) {
      dwr[i] += g * in[i];
      din[i] += g * row[i];
    }
  }
}

// Returns cross-entropy; writes softmax(logits) - onehot(label) into dlogits.
template <typename Real>
Real softmax_xent(const Real* logits, std::size_t k, int label, Real* dlogits) {
  Real m = logits[0];
  for (std::size_t j = 1; j < k; ++j) m = std::max(m, logits[j]);
  Real sum = Real(0);
  for (std::size_t j = 0; j < k; ++j) {
    dlogits[j] = std::exp(logits[j] - m);
    sum += dlogits[j];
  }
  const Real inv = Real(1) / sum;
  for (std::size_t j = 0; j < k; ++j) dlogits[j] *= inv;
  const Real loss = std::log(sum) - (logits[static_cast<std::size_t>(label)] - m);
  dlogits[static_cast<std::size_t>(label)] -= Real(1);
  return loss;
}

}  // namespace netmath

/// Forward pass over one [C, H, W] image; fills acts and returns nothing
/// (logits live in acts.logits).
template <typename Real>
void net_forward(const NetParamsT<Real>& p, const Real* image, std::size_t h,
                 std::size_t w, NetActsT<Real>& acts) {
  const std::size_t hw = h * w;
  const Real* in = image;
  std::size_t c_in = p.in_channels;
  for (std::size_t l = 0; l < 3; ++l) {
    acts.conv_out[l].resize(kConvChannels[l] * hw);
    netmath::conv3x3_forward(in, c_in, h, w, p.conv_w[l].data(), p.conv_b[l].data(),
                             kConvChannels[l], acts.conv_out[l].data());
    netmath::relu_forward(acts.conv_out[l].data(), acts.conv_out[l].size());
    in = acts.conv_out[l].data();
    c_in = kConvChannels[l];
  }
  acts.pooled.resize(kConvChannels[2]);
  netmath::gap_forward(acts.conv_out[2].data(), kConvChannels[2], hw, acts.pooled.data());
  acts.logits.resize(p.n_classes);
  netmath::linear_forward(acts.pooled.data(), p.fc_w.data(), p.fc_b.data(), p.n_classes,
                          kConvChannels[2], acts.logits.data());
}

/// Backward for one image given dlogits; accumulates into grads.
template <typename Real>
void net_backward(const NetParamsT<Real>& p, const Real* image, std::size_t h,
                  std::size_t w, const NetActsT<Real>& acts, const Real* dlogits,
                  NetParamsT<Real>& grads) {
  const std::size_t hw = h * w;
  std::vector<Real> dpooled(kConvChannels[2]);
  netmath::linear_backward(acts.pooled.data(), p.fc_w.data(), dlogits, p.n_classes,
                           kConvChannels[2], grads.fc_w.data(), grads.fc_b.data(),
                           dpooled.data());
  std::vector<Real> dact(kConvChannels[2] * hw);
  netmath::gap_backward(dpooled.data(), kConvChannels[2], hw, dact.data());

  for (int l = 2; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    netmath::relu_backward(acts.conv_out[ul].data(), dact.data(),
                           acts.conv_out[ul].size());
    const Real* layer_in = l == 0 ? image : acts.conv_out[ul - 1].data();
    const std::size_t c_in = NetParamsT<Real>::conv_in_channels(ul, p.in_channels);
    std::vector<Real> din(c_in * hw);
    netmath::conv3x3_backward(layer_in, p.conv_w[ul].data(), dact.data(), c_in, h, w,
                              kConvChannels[ul], grads.conv_w[ul].data(),
                              grads.conv_b[ul].data(), din.data());
    dact = std::move(din);
  }
}

/// Weighted-batch loss and gradients: loss = sum_i weights[i] * xent_i, with
/// gradients to match. Per-sample losses are reported unweighted.
template <typename Real>
struct BatchResultT {
  Real loss = Real(0);
  std::vector<Real> per_sample_loss;
  std::vector<int> predictions;
};

template <typename Real>
BatchResultT<Real> net_batch_backward(const NetParamsT<Real>& p, const Real* images,
                                      std::size_t n, std::size_t h, std::size_t w,
                                      std::span<const int> labels,
                                      std::span<const Real> weights,
                                      NetParamsT<Real>& grads) {
  if (labels.size() != n || weights.size() != n)
    throw std::invalid_argument("net_batch_backward: length mismatch");
  const std::size_t img_len = p.in_channels * h * w;
  BatchResultT<Real> res;
  res.per_sample_loss.resize(n);
  res.predictions.resize(n);

  NetActsT<Real> acts;
  std::vector<Real> dlogits(p.n_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const Real* img = images + i * img_len;
    net_forward(p, img, h, w, acts);
    const Real loss =
        netmath::softmax_xent(acts.logits.data(), p.n_classes, labels[i], dlogits.data());
    res.per_sample_loss[i] = loss;
    res.loss += weights[i] * loss;
    std::size_t best = 0;
    for (std::size_t j = 1; j < p.n_classes; ++j)
      if (acts.logits[j] > acts.logits[best]) best = j;
    res.predictions[i] = static_cast<int>(best);
    for (auto& g : dlogits) g *= weights[i];
    net_backward(p, img, h, w, acts, dlogits.data(), grads);
  }
  return res;
}

/// Loss only, same weighting convention; used by the finite-difference check.
template <typename Real>
Real net_batch_loss(const NetParamsT<Real>& p, const Real* images, std::size_t n,
                    std::size_t h, std::size_t w, std::span<const int> labels,
                    std::span<const Real> weights) {
  const std::size_t img_len = p.in_channels * h * w;
  NetActsT<Real> acts;
  std::vector<Real> dlogits(p.n_classes);
  Real total = Real(0);
  for (std::size_t i = 0; i < n; ++i) {
    net_forward(p, images + i * img_len, h, w, acts);
    total += weights[i] * netmath::softmax_xent(acts.logits.data(), p.n_classes,
                                                labels[i], dlogits.data());
  }
  return total;
}

struct SgdmConfig {
  double lr = 0.01;
  double l2 = 0.0;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  uint64_t seed = 0;
};

/// Throws ConfigError on out-of-range fields.
void validate(const SgdmConfig& cfg);

/// v <- m*v + (g + l2*theta); theta <- theta - lr*v. Momentum buffers are
/// owned by the caller and must match the parameter layout.
void sgdm_step(NetParams& params, const NetParams& grads, const SgdmConfig& cfg,
               NetParams& momentum);

/// He-uniform weights, zero biases, seeded.
NetParams init_net(std::size_t in_channels, std::size_t n_classes, uint64_t seed);

/// Logits for one [C, H, W] image.
std::vector<float> forward(const NetParams& p, const Tensor& image);

/// Argmax class for each row of a [N, C, H, W] stack.
std::vector<int> predict(const NetParams& p, const Tensor& images);

/// Mean cross-entropy over a [N, C, H, W] stack (no gradients).
double mean_loss(const NetParams& p, const Tensor& images, std::span<const int> labels);

/// Per-sample cross-entropy for selected rows of a [N, C, H, W] stack.
std::vector<double> batch_losses(const NetParams& p, const Tensor& images,
                                 std::span<const std::size_t> indices,
                                 std::span<const int> labels);

/// Post-ReLU maps for the requested layers, each reshaped to [H*W, C_l].
std::vector<FeatureMap> extract_features(const NetParams& p, const Tensor& image,
                                         std::span<const int> layer_ids);

/// Mean cross-entropy and mean gradients over a batch (uniform weights 1/N).
struct LossAndGrads {
  double loss = 0.0;
  NetParams grads;
};
LossAndGrads loss_and_grads(const NetParams& p, const Tensor& images,
                            std::span<const int> labels);

/// Weighted batch gradient with a fixed, thread-count-independent reduction
/// order. Weights follow the net_batch_backward convention.
struct WeightedBatchResult {
  double loss = 0.0;
  std::vector<double> per_sample_loss;
  std::vector<int> predictions;
};
WeightedBatchResult weighted_batch_grads(const NetParams& p, const Tensor& images,
                                         std::span<const std::size_t> indices,
                                         std::span<const int> labels,
                                         std::span<const double> weights,
                                         NetParams& grads);

/// Checkpoint directory: one GRTN per parameter array + manifest.json.
void checkpoint_save(const NetParams& p, const std::filesystem::path& dir,
                     uint64_t seed, std::size_t epoch);
NetParams checkpoint_load(const std::filesystem::path& dir);

}  // namespace gramclust
