#include "spec/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>

#include <json.hpp>

namespace spec::nn {

namespace {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Dense kernels. C += A @ B with row-major operands, 4-row register blocking,
// contiguous inner loop over columns so the compiler vectorizes it. Reduction
// order is fixed by construction (k ascending), independent of batch size.
// ---------------------------------------------------------------------------

void gemm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  int i = 0;
  for (; i + 4 <= M; i += 4) {
    const double* a0 = A + static_cast<size_t>(i) * K;
    const double* a1 = a0 + K;
    const double* a2 = a1 + K;
    const double* a3 = a2 + K;
    double* c0 = C + static_cast<size_t>(i) * N;
    double* c1 = c0 + N;
    double* c2 = c1 + N;
    double* c3 = c2 + N;
    for (int k = 0; k < K; ++k) {
      const double* b = B + static_cast<size_t>(k) * N;
      const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
#pragma GCC ivdep
      for (int j = 0; j < N; ++j) {
        c0[j] += v0 * b[j];
        c1[j] += v1 * b[j];
        c2[j] += v2 * b[j];
        c3[j] += v3 * b[j];
      }
    }
  }
  for (; i < M; ++i) {
    const double* a = A + static_cast<size_t>(i) * K;
    double* c = C + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const double* b = B + static_cast<size_t>(k) * N;
      const double v = a[k];
#pragma GCC ivdep
      for (int j = 0; j < N; ++j) c[j] += v * b[j];
    }
  }
}

void transpose(const double* A, double* At, int rows, int cols) {
  constexpr int T = 32;
  for (int i0 = 0; i0 < rows; i0 += T)
    for (int j0 = 0; j0 < cols; j0 += T) {
      const int i1 = std::min(i0 + T, rows), j1 = std::min(j0 + T, cols);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j)
          At[static_cast<size_t>(j) * rows + i] = A[static_cast<size_t>(i) * cols + j];
    }
}

// grow-only scratch buffers, one set per thread
thread_local std::vector<double> tl_xt, tl_wt, tl_dpre, tl_din;

// Reuses t's storage when the shape already matches; contents are undefined
// until the caller fills them.
void ensure_shape(Tensor& t, std::vector<int> shape) {
  if (t.shape == shape) return;
  const size_t n = Tensor::numel_of(shape);
  t.shape = std::move(shape);
  t.v.resize(n);
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void apply_activation(const Activation& act, const double* pre, double* out, size_t n) {
  switch (act.kind) {
    case Act::linear:
      if (out != pre) std::memcpy(out, pre, n * sizeof(double));
      break;
    case Act::relu:
      for (size_t i = 0; i < n; ++i) out[i] = pre[i] > 0 ? pre[i] : 0.0;
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < n; ++i) out[i] = act.scale * sigmoid(pre[i]);
      break;
  }
}

// dL/dpre from dL/dout, given pre-activations.
void activation_backward(const Activation& act, const double* pre, const double* dout, double* dpre,
                         size_t n) {
  switch (act.kind) {
    case Act::linear:
      if (dpre != dout) std::memcpy(dpre, dout, n * sizeof(double));
      break;
    case Act::relu:
      for (size_t i = 0; i < n; ++i) dpre[i] = pre[i] > 0 ? dout[i] : 0.0;
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < n; ++i) {
        const double s = sigmoid(pre[i]);
        dpre[i] = dout[i] * act.scale * s * (1.0 - s);
      }
      break;
  }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

std::vector<int> layer_output_shape(const LayerSpec& layer, const std::vector<int>& in) {
  if (std::holds_alternative<DenseSpec>(layer)) {
    const auto& d = std::get<DenseSpec>(layer);
    if (in.size() != 1 || in[0] != d.in) throw std::invalid_argument("dense: input shape mismatch");
    return {d.out};
  }
  if (std::holds_alternative<Conv1dSpec>(layer)) {
    const auto& c = std::get<Conv1dSpec>(layer);
    if (in.size() != 2 || in[0] != c.in_ch) throw std::invalid_argument("conv1d: input shape mismatch");
    if (c.kernel % 2 == 0 || c.kernel < 1) throw std::invalid_argument("conv1d: kernel must be odd");
    return {c.out_ch, in[1]};
  }
  if (std::holds_alternative<MaxPool1dSpec>(layer)) {
    const auto& p = std::get<MaxPool1dSpec>(layer);
    if (in.size() != 2) throw std::invalid_argument("maxpool1d: expected [ch, len] input");
    const int out_len = in[1] / p.width;
    if (out_len < 1) throw std::invalid_argument("maxpool1d: input too short");
    return {in[0], out_len};
  }
  if (std::holds_alternative<AdaptiveAvgPoolSpec>(layer)) {
    const auto& p = std::get<AdaptiveAvgPoolSpec>(layer);
    if (in.size() != 2) throw std::invalid_argument("adaptive_avg_pool: expected [ch, len] input");
    if (in[1] < 1) throw std::invalid_argument("adaptive_avg_pool: empty input");
    return {in[0], p.target_len};
  }
  int n = 1;
  for (int d : in) n *= d;
  return {n};  // flatten
}

std::atomic<uint64_t> g_ticket{1};

}  // namespace

std::vector<int> NetworkSpec::infer_output_shape(const std::vector<int>& input_shape) const {
  std::vector<int> s = input_shape;
  for (const auto& layer : layers) s = layer_output_shape(layer, s);
  return s;
}

NetworkSpec mlp(const std::vector<int>& widths, Activation hidden, Activation output) {
  if (widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
  NetworkSpec spec;
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = (i + 2 == widths.size());
    spec.layers.push_back(DenseSpec{widths[i], widths[i + 1], last ? output : hidden});
  }
  return spec;
}

size_t NetworkWeights::param_count() const {
  size_t n = 0;
  for (const auto& l : layers) n += l.w.numel() + l.b.numel();
  return n;
}

NetworkWeights init_weights(const NetworkSpec& spec, RngStream& rng) {
  NetworkWeights w;
  w.layers.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (std::holds_alternative<DenseSpec>(spec.layers[i])) {
      const auto& d = std::get<DenseSpec>(spec.layers[i]);
      const double s = std::sqrt(6.0 / (d.in + d.out));
      w.layers[i].w = Tensor({d.in, d.out});
      for (auto& x : w.layers[i].w.v) x = rng.uniform(-s, s);
      w.layers[i].b = Tensor({d.out});
    } else if (std::holds_alternative<Conv1dSpec>(spec.layers[i])) {
      const auto& c = std::get<Conv1dSpec>(spec.layers[i]);
      const double s = std::sqrt(6.0 / (c.in_ch * c.kernel + c.out_ch * c.kernel));
      w.layers[i].w = Tensor({c.out_ch, c.in_ch, c.kernel});
      for (auto& x : w.layers[i].w.v) x = rng.uniform(-s, s);
      w.layers[i].b = Tensor({c.out_ch});
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

void dense_forward(const DenseSpec& d, const LayerWeights& lw, const Tensor& x, Tensor& pre,
                   Tensor& out) {
  const int B = x.dim(0);
  Tensor& target = d.act.kind == Act::linear ? out : pre;  // linear: skip the copy
  ensure_shape(target, {B, d.out});
  for (int i = 0; i < B; ++i)
    std::memcpy(target.data() + static_cast<size_t>(i) * d.out, lw.b.data(), sizeof(double) * d.out);
  gemm_acc(x.data(), lw.w.data(), target.data(), B, d.in, d.out);
  if (d.act.kind == Act::linear) {
    pre.shape.clear();
    pre.v.clear();
    return;
  }
  ensure_shape(out, {B, d.out});
  apply_activation(d.act, pre.data(), out.data(), pre.numel());
}

void conv1d_forward(const Conv1dSpec& c, const LayerWeights& lw, const Tensor& x, Tensor& pre,
                    Tensor& out) {
  const int B = x.dim(0), L = x.dim(2);
  const int p = (c.kernel - 1) / 2;
  Tensor& target = c.act.kind == Act::linear ? out : pre;
  ensure_shape(target, {B, c.out_ch, L});
  for (int b = 0; b < B; ++b) {
    const double* xb = x.data() + static_cast<size_t>(b) * c.in_ch * L;
    double* zb = target.data() + static_cast<size_t>(b) * c.out_ch * L;
    for (int oc = 0; oc < c.out_ch; ++oc) {
      double* z = zb + static_cast<size_t>(oc) * L;
      const double bias = lw.b[oc];
      for (int l = 0; l < L; ++l) z[l] = bias;
      for (int ic = 0; ic < c.in_ch; ++ic) {
        const double* xi = xb + static_cast<size_t>(ic) * L;
        const double* wk = lw.w.data() + (static_cast<size_t>(oc) * c.in_ch + ic) * c.kernel;
        for (int t = 0; t < c.kernel; ++t) {
          const double wv = wk[t];
          const int lo = std::max(0, p - t), hi = std::min(L, L + p - t);
#pragma GCC ivdep
          for (int l = lo; l < hi; ++l) z[l] += wv * xi[l + t - p];
        }
      }
    }
  }
  if (c.act.kind == Act::linear) {
    pre.shape.clear();
    pre.v.clear();
    return;
  }
  ensure_shape(out, {B, c.out_ch, L});
  apply_activation(c.act, pre.data(), out.data(), pre.numel());
}

void maxpool_forward(const MaxPool1dSpec& pspec, const Tensor& x, Tensor& out,
                     std::vector<int>& argmax) {
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const int OL = L / pspec.width;
  ensure_shape(out, {B, C, OL});
  argmax.assign(out.numel(), 0);
  size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int ch = 0; ch < C; ++ch) {
      const double* xi = x.data() + (static_cast<size_t>(b) * C + ch) * L;
      for (int l = 0; l < OL; ++l, ++o) {
        int best = l * pspec.width;
        double bv = xi[best];
        for (int t = 1; t < pspec.width; ++t) {
          const int idx = l * pspec.width + t;
          if (xi[idx] > bv) {
            bv = xi[idx];
            best = idx;
          }
        }
        out[o] = bv;
        argmax[o] = best;
      }
    }
}

void adaptive_pool_forward(const AdaptiveAvgPoolSpec& pspec, const Tensor& x, Tensor& out) {
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const int OL = pspec.target_len;
  ensure_shape(out, {B, C, OL});
  size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int ch = 0; ch < C; ++ch) {
      const double* xi = x.data() + (static_cast<size_t>(b) * C + ch) * L;
      for (int l = 0; l < OL; ++l, ++o) {
        const int lo = (l * L) / OL;
        const int hi = ((l + 1) * L + OL - 1) / OL;  // ceil
        double s = 0;
        for (int t = lo; t < hi; ++t) s += xi[t];
        out[o] = s / (hi - lo);
      }
    }
}

}  // namespace

Tensor forward(const NetworkSpec& spec, const NetworkWeights& w, const Tensor& input,
               ForwardCache* cache) {
  if (w.layers.size() != spec.layers.size())
    throw std::invalid_argument("forward: weights do not match spec");
  if (input.shape.size() < 2) throw std::invalid_argument("forward: input needs a batch dimension");
  std::vector<int> feat(input.shape.begin() + 1, input.shape.end());
  spec.infer_output_shape(feat);  // validate once up front

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.input0 = input;
  c.outputs.resize(spec.layers.size());
  c.preacts.resize(spec.layers.size());
  c.argmax.resize(spec.layers.size());

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const Tensor& cur = c.input_of(i);
    const LayerSpec& layer = spec.layers[i];
    if (std::holds_alternative<DenseSpec>(layer)) {
      dense_forward(std::get<DenseSpec>(layer), w.layers[i], cur, c.preacts[i], c.outputs[i]);
    } else if (std::holds_alternative<Conv1dSpec>(layer)) {
      conv1d_forward(std::get<Conv1dSpec>(layer), w.layers[i], cur, c.preacts[i], c.outputs[i]);
    } else if (std::holds_alternative<MaxPool1dSpec>(layer)) {
      maxpool_forward(std::get<MaxPool1dSpec>(layer), cur, c.outputs[i], c.argmax[i]);
    } else if (std::holds_alternative<AdaptiveAvgPoolSpec>(layer)) {
      adaptive_pool_forward(std::get<AdaptiveAvgPoolSpec>(layer), cur, c.outputs[i]);
    } else {  // flatten: reshape copy
      int n = 1;
      for (size_t d = 1; d < cur.shape.size(); ++d) n *= cur.shape[d];
      ensure_shape(c.outputs[i], {cur.dim(0), n});
      std::memcpy(c.outputs[i].data(), cur.data(), cur.numel() * sizeof(double));
    }
  }
  c.ticket = g_ticket.fetch_add(1, std::memory_order_relaxed);
  return c.output();
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void backward_into(const NetworkSpec& spec, const NetworkWeights& w, const ForwardCache& cache,
                   const Tensor& output_grad, Gradients& g) {
  if (cache.ticket == 0 || cache.outputs.size() != spec.layers.size())
    throw std::invalid_argument("backward: cache does not match spec (stale or missing forward)");
  if (!output_grad.same_shape(cache.output()))
    throw std::invalid_argument("backward: output_grad shape mismatch");

  g.wgrad.layers.resize(spec.layers.size());

  // dout/din ping-pong through thread-local scratch
  tl_dpre.assign(output_grad.v.begin(), output_grad.v.end());
  std::vector<double>* dout = &tl_dpre;

  for (size_t li = spec.layers.size(); li-- > 0;) {
    const LayerSpec& layer = spec.layers[li];
    const Tensor& x = cache.input_of(li);

    if (std::holds_alternative<DenseSpec>(layer)) {
      const auto& d = std::get<DenseSpec>(layer);
      const int B = x.dim(0);
      const size_t n = static_cast<size_t>(B) * d.out;
      // in place: dout becomes dpre
      if (d.act.kind != Act::linear)
        activation_backward(d.act, cache.preacts[li].data(), dout->data(), dout->data(), n);
      const double* dpre = dout->data();

      auto& lw = g.wgrad.layers[li];
      ensure_shape(lw.w, {d.in, d.out});
      ensure_shape(lw.b, {d.out});
      std::fill(lw.w.v.begin(), lw.w.v.end(), 0.0);
      std::fill(lw.b.v.begin(), lw.b.v.end(), 0.0);
      tl_xt.resize(static_cast<size_t>(d.in) * B);
      transpose(x.data(), tl_xt.data(), B, d.in);
      gemm_acc(tl_xt.data(), dpre, lw.w.data(), d.in, B, d.out);
      for (int i = 0; i < B; ++i) {
        const double* row = dpre + static_cast<size_t>(i) * d.out;
#pragma GCC ivdep
        for (int j = 0; j < d.out; ++j) lw.b[j] += row[j];
      }
      // dX = dpre @ W^T via transposed weights
      tl_wt.resize(static_cast<size_t>(d.out) * d.in);
      transpose(w.layers[li].w.data(), tl_wt.data(), d.in, d.out);
      tl_din.assign(static_cast<size_t>(B) * d.in, 0.0);
      gemm_acc(dpre, tl_wt.data(), tl_din.data(), B, d.out, d.in);
      std::swap(tl_dpre, tl_din);
      dout = &tl_dpre;
    } else if (std::holds_alternative<Conv1dSpec>(layer)) {
      const auto& cv = std::get<Conv1dSpec>(layer);
      const int B = x.dim(0), L = x.dim(2), p = (cv.kernel - 1) / 2;
      const size_t n = static_cast<size_t>(B) * cv.out_ch * L;
      if (cv.act.kind != Act::linear)
        activation_backward(cv.act, cache.preacts[li].data(), dout->data(), dout->data(), n);
      const double* dpre = dout->data();

      auto& lw = g.wgrad.layers[li];
      ensure_shape(lw.w, {cv.out_ch, cv.in_ch, cv.kernel});
      ensure_shape(lw.b, {cv.out_ch});
      std::fill(lw.w.v.begin(), lw.w.v.end(), 0.0);
      std::fill(lw.b.v.begin(), lw.b.v.end(), 0.0);
      tl_din.assign(static_cast<size_t>(B) * cv.in_ch * L, 0.0);
      for (int b = 0; b < B; ++b) {
        const double* xb = x.data() + static_cast<size_t>(b) * cv.in_ch * L;
        const double* db = dpre + static_cast<size_t>(b) * cv.out_ch * L;
        double* ib = tl_din.data() + static_cast<size_t>(b) * cv.in_ch * L;
        for (int oc = 0; oc < cv.out_ch; ++oc) {
          const double* dz = db + static_cast<size_t>(oc) * L;
          double s = 0;
          for (int l = 0; l < L; ++l) s += dz[l];
          lw.b[oc] += s;
          for (int ic = 0; ic < cv.in_ch; ++ic) {
            const double* xi = xb + static_cast<size_t>(ic) * L;
            double* di = ib + static_cast<size_t>(ic) * L;
            double* wg = lw.w.data() + (static_cast<size_t>(oc) * cv.in_ch + ic) * cv.kernel;
            const double* wv = w.layers[li].w.data() + (static_cast<size_t>(oc) * cv.in_ch + ic) * cv.kernel;
            for (int t = 0; t < cv.kernel; ++t) {
              const int lo = std::max(0, p - t), hi = std::min(L, L + p - t);
              double acc = 0;
              for (int l = lo; l < hi; ++l) acc += dz[l] * xi[l + t - p];
              wg[t] += acc;
              const double wvt = wv[t];
#pragma GCC ivdep
              for (int l = lo; l < hi; ++l) di[l + t - p] += wvt * dz[l];
            }
          }
        }
      }
      std::swap(tl_dpre, tl_din);
      dout = &tl_dpre;
    } else if (std::holds_alternative<MaxPool1dSpec>(layer)) {
      const auto& am = cache.argmax[li];
      const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
      const int OL = cache.outputs[li].dim(2);
      tl_din.assign(x.numel(), 0.0);
      size_t o = 0;
      for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < C; ++ch) {
          double* di = tl_din.data() + (static_cast<size_t>(b) * C + ch) * L;
          const double* dz = dout->data() + (static_cast<size_t>(b) * C + ch) * OL;
          for (int l = 0; l < OL; ++l, ++o) di[am[o]] += dz[l];
        }
      std::swap(tl_dpre, tl_din);
      dout = &tl_dpre;
    } else if (std::holds_alternative<AdaptiveAvgPoolSpec>(layer)) {
      const auto& ps = std::get<AdaptiveAvgPoolSpec>(layer);
      const int B = x.dim(0), C = x.dim(1), L = x.dim(2), OL = ps.target_len;
      tl_din.assign(x.numel(), 0.0);
      for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < C; ++ch) {
          double* di = tl_din.data() + (static_cast<size_t>(b) * C + ch) * L;
          const double* dz = dout->data() + (static_cast<size_t>(b) * C + ch) * OL;
          for (int l = 0; l < OL; ++l) {
            const int lo = (l * L) / OL;
            const int hi = ((l + 1) * L + OL - 1) / OL;
            const double v = dz[l] / (hi - lo);
            for (int t = lo; t < hi; ++t) di[t] += v;
          }
        }
      std::swap(tl_dpre, tl_din);
      dout = &tl_dpre;
    }
    // flatten: gradient passes through unchanged (same flat layout)
  }

  ensure_shape(g.input_grad, cache.input0.shape);
  std::copy(dout->begin(), dout->end(), g.input_grad.v.begin());
}

Gradients backward(const NetworkSpec& spec, const NetworkWeights& w, const ForwardCache& cache,
                   const Tensor& output_grad) {
  Gradients g;
  backward_into(spec, w, cache, output_grad, g);
  return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(AdamState& state, double* params, const double* grads, size_t n) {
  if (state.m.size() != n) throw std::invalid_argument("adam: state size mismatch");
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(grads[i])) throw std::runtime_error("adam: non-finite gradient");
  state.step += 1;
  const double bc1 = 1.0 / (1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  const double bc2 = 1.0 / (1.0 - std::pow(state.beta2, static_cast<double>(state.step)));
  double* m = state.m.data();
  double* v = state.v.data();
  const double b1 = state.beta1, b2 = state.beta2, lr = state.lr, eps = state.eps;
#pragma GCC ivdep
  for (size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
    params[i] -= lr * (m[i] * bc1) / (std::sqrt(v[i] * bc2) + eps);
  }
}

void adam_step(AdamState& state, NetworkWeights& w, const NetworkWeights& grads) {
  const size_t total = w.param_count();
  if (state.m.empty()) {
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  }
  if (state.m.size() != total) throw std::invalid_argument("adam: state size mismatch");

  for (size_t li = 0, off = 0; li < w.layers.size(); ++li) {
    auto step_piece = [&](Tensor& p, const Tensor& gt) {
      const size_t n = p.numel();
      if (n == 0) return;
      const double* gr = gt.data();
      for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(gr[i])) throw std::runtime_error("adam: non-finite gradient");
      const double bc1 = 1.0 / (1.0 - std::pow(state.beta1, static_cast<double>(state.step + 1)));
      const double bc2 = 1.0 / (1.0 - std::pow(state.beta2, static_cast<double>(state.step + 1)));
      double* m = state.m.data() + off;
      double* v = state.v.data() + off;
      double* pp = p.data();
      const double b1 = state.beta1, b2 = state.beta2, lr = state.lr, eps = state.eps;
#pragma GCC ivdep
      for (size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * gr[i];
        v[i] = b2 * v[i] + (1.0 - b2) * gr[i] * gr[i];
        pp[i] -= lr * (m[i] * bc1) / (std::sqrt(v[i] * bc2) + eps);
      }
      off += n;
    };
    step_piece(w.layers[li].w, grads.layers[li].w);
    step_piece(w.layers[li].b, grads.layers[li].b);
  }
  state.step += 1;
}

std::vector<size_t> bootstrap_sample(size_t buffer_size, size_t n_draws, RngStream& rng) {
  if (buffer_size == 0) throw std::invalid_argument("bootstrap_sample: empty buffer");
  std::vector<size_t> idx(n_draws);
  for (auto& i : idx) i = rng.index(buffer_size);
  return idx;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace {

double probe_value(const NetworkSpec& spec, const NetworkWeights& w, const Tensor& input,
                   const std::vector<double>& r) {
  Tensor out = forward(spec, w, input);
  double s = 0;
  for (size_t i = 0; i < out.numel(); ++i) s += r[i] * out[i];
  return s;
}

struct FdEstimate {
  double value = 0.0;
  bool valid = false;
};

// Central difference with step h, cross-checked against step h/2. Invalid
// when the two estimates disagree, which flags a kink inside the stencil.
FdEstimate fd_probe(double* slot, double h, const std::function<double()>& f) {
  const double saved = *slot;
  auto central = [&](double step) {
    *slot = saved + step;
    const double fp = f();
    *slot = saved - step;
    const double fm = f();
    *slot = saved;
    return (fp - fm) / (2.0 * step);
  };
  const double g1 = central(h);
  const double g2 = central(h / 2);
  FdEstimate e;
  e.valid = std::abs(g1 - g2) <= 1e-6 * std::max({1.0, std::abs(g1), std::abs(g2)});
  e.value = (4.0 * g2 - g1) / 3.0;  // Richardson, cancels the h^2 term
  return e;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

GradCheckReport grad_check(const NetworkSpec& spec, const NetworkWeights& w, const Tensor& input,
                           double tolerance, const GradCheckOptions& opts) {
  GradCheckReport rep;
  NetworkWeights wc = w;  // mutable copy for probing
  Tensor in = input;

  RngStream probe_rng(opts.seed, 7001);
  Tensor out = forward(spec, wc, in);
  std::vector<double> r(out.numel());
  for (auto& x : r) x = probe_rng.uniform(-1.0, 1.0);

  ForwardCache cache;
  forward(spec, wc, in, &cache);
  Tensor og(out.shape, r);
  Gradients analytic = backward(spec, wc, cache, og);

  auto f = [&]() { return probe_value(spec, wc, in, r); };
  const size_t redraw_budget =
      20 * (opts.max_probes_per_layer * spec.layers.size() + opts.max_input_probes) + 64;

  auto run_probes = [&](double* base, const double* agrad, size_t n, size_t want, double& max_err,
                        std::vector<double>& errs) {
    if (n == 0) return true;
    want = std::min(want, n);
    size_t done = 0;
    size_t attempts = 0;
    const bool exhaustive = n <= want;
    size_t cursor = 0;
    while (done < want) {
      if (rep.redrawn + attempts > redraw_budget) return false;
      size_t idx;
      if (exhaustive) {
        if (cursor >= n) break;
        idx = cursor++;
      } else {
        idx = probe_rng.index(n);
      }
      FdEstimate e = fd_probe(base + idx, opts.h, f);
      ++attempts;
      if (!e.valid) {
        if (exhaustive) ++done;  // skip kinked slots in exhaustive mode too
        ++rep.redrawn;
        continue;
      }
      const double err = rel_err(agrad[idx], e.value);
      errs.push_back(err);
      max_err = std::max(max_err, err);
      ++rep.probes;
      ++done;
    }
    return true;
  };

  bool ok = true;
  for (size_t li = 0; li < spec.layers.size() && ok; ++li) {
    auto& lw = wc.layers[li];
    if (!lw.has_params()) continue;
    ok = run_probes(lw.w.data(), analytic.wgrad.layers[li].w.data(), lw.w.numel(),
                    opts.max_probes_per_layer, rep.max_rel_err_weights, rep.weight_errors);
    if (ok)
      ok = run_probes(lw.b.data(), analytic.wgrad.layers[li].b.data(), lw.b.numel(),
                      std::max<size_t>(2, opts.max_probes_per_layer / 4), rep.max_rel_err_weights,
                      rep.weight_errors);
  }
  if (ok)
    ok = run_probes(in.data(), analytic.input_grad.data(), in.numel(), opts.max_input_probes,
                    rep.max_rel_err_inputs, rep.input_errors);

  if (!ok) {
    rep.pass = false;
    rep.detail = "too many non-smooth probes; input likely sits on activation kinks";
    return rep;
  }
  rep.pass = rep.max_rel_err_weights <= tolerance && rep.max_rel_err_inputs <= tolerance;
  rep.detail = "max relative error: weights " + std::to_string(rep.max_rel_err_weights) +
               ", inputs " + std::to_string(rep.max_rel_err_inputs);
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json act_to_json(const Activation& a) {
  const char* k = a.kind == Act::linear ? "linear" : a.kind == Act::relu ? "relu" : "sigmoid";
  json j;
  j["kind"] = k;
  j["scale"] = a.scale;
  return j;
}

Activation act_from_json(const json& j) {
  Activation a;
  const std::string k = j.at("kind").get<std::string>();
  if (k == "linear")
    a.kind = Act::linear;
  else if (k == "relu")
    a.kind = Act::relu;
  else if (k == "sigmoid")
    a.kind = Act::sigmoid;
  else
    throw std::runtime_error("unknown activation: " + k);
  a.scale = j.value("scale", 1.0);
  return a;
}

}  // namespace

void save_network(const std::string& path_prefix, const NetworkSpec& spec, const NetworkWeights& w,
                  uint64_t seed, const std::string& extra_json) {
  json j;
  j["format"] = "spec-net-v1";
  j["precision"] = "f64";
  j["seed"] = seed;
  json layers = json::array();
  json shapes = json::array();
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    json lj;
    if (std::holds_alternative<DenseSpec>(l)) {
      const auto& d = std::get<DenseSpec>(l);
      lj = {{"type", "dense"}, {"in", d.in}, {"out", d.out}, {"act", act_to_json(d.act)}};
    } else if (std::holds_alternative<Conv1dSpec>(l)) {
      const auto& c = std::get<Conv1dSpec>(l);
      lj = {{"type", "conv1d"}, {"in_ch", c.in_ch}, {"out_ch", c.out_ch}, {"kernel", c.kernel},
            {"act", act_to_json(c.act)}};
    } else if (std::holds_alternative<MaxPool1dSpec>(l)) {
      lj = {{"type", "maxpool1d"}, {"width", std::get<MaxPool1dSpec>(l).width}};
    } else if (std::holds_alternative<AdaptiveAvgPoolSpec>(l)) {
      lj = {{"type", "adaptive_avg_pool"}, {"target_len", std::get<AdaptiveAvgPoolSpec>(l).target_len}};
    } else {
      lj = {{"type", "flatten"}};
    }
    layers.push_back(lj);
    shapes.push_back({{"w", w.layers[i].w.shape}, {"b", w.layers[i].b.shape}});
  }
  j["layers"] = layers;
  j["shapes"] = shapes;
  if (!extra_json.empty()) j["extra"] = json::parse(extra_json);

  std::ofstream meta(path_prefix + ".json");
  if (!meta) throw std::runtime_error("cannot write " + path_prefix + ".json");
  meta << j.dump(2) << "\n";

  std::ofstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + path_prefix + ".bin");
  for (const auto& lw : w.layers) {
    bin.write(reinterpret_cast<const char*>(lw.w.data()),
              static_cast<std::streamsize>(lw.w.numel() * sizeof(double)));
    bin.write(reinterpret_cast<const char*>(lw.b.data()),
              static_cast<std::streamsize>(lw.b.numel() * sizeof(double)));
  }
}

LoadedNetwork load_network(const std::string& path_prefix) {
  std::ifstream meta(path_prefix + ".json");
  if (!meta) throw std::runtime_error("cannot read " + path_prefix + ".json");
  json j = json::parse(meta);
  if (j.value("format", "") != "spec-net-v1") throw std::runtime_error("unknown checkpoint format");

  LoadedNetwork net;
  net.seed = j.value("seed", 0ull);
  if (j.contains("extra")) net.extra_json = j["extra"].dump();
  for (const auto& lj : j.at("layers")) {
    const std::string type = lj.at("type").get<std::string>();
    if (type == "dense")
      net.spec.layers.push_back(
          DenseSpec{lj.at("in").get<int>(), lj.at("out").get<int>(), act_from_json(lj.at("act"))});
    else if (type == "conv1d")
      net.spec.layers.push_back(Conv1dSpec{lj.at("in_ch").get<int>(), lj.at("out_ch").get<int>(),
                                           lj.at("kernel").get<int>(), act_from_json(lj.at("act"))});
    else if (type == "maxpool1d")
      net.spec.layers.push_back(MaxPool1dSpec{lj.at("width").get<int>()});
    else if (type == "adaptive_avg_pool")
      net.spec.layers.push_back(AdaptiveAvgPoolSpec{lj.at("target_len").get<int>()});
    else if (type == "flatten")
      net.spec.layers.push_back(FlattenSpec{});
    else
      throw std::runtime_error("unknown layer type: " + type);
  }

  net.weights.layers.resize(net.spec.layers.size());
  const json& shapes = j.at("shapes");
  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + path_prefix + ".bin");
  for (size_t i = 0; i < net.spec.layers.size(); ++i) {
    auto read_tensor = [&](const json& shape_j) {
      std::vector<int> shape = shape_j.get<std::vector<int>>();
      if (shape.empty()) return Tensor();  // parameterless layer
      Tensor t(shape);
      bin.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double)));
      if (!bin && t.numel() > 0) throw std::runtime_error("checkpoint weight file truncated");
      return t;
    };
    net.weights.layers[i].w = read_tensor(shapes[i].at("w"));
    net.weights.layers[i].b = read_tensor(shapes[i].at("b"));
  }
  return net;
}

}  // namespace spec::nn
