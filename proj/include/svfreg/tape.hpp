#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "svfreg/errors.hpp"
#include "svfreg/interp.hpp"
#include "svfreg/stencils.hpp"
#include "svfreg/tensor.hpp"

namespace svfreg {

// Reverse-mode tape over channel-planar tensors.  Forward is eager; each op
// pushes a node holding its value plus a closure that scatters the node's
// gradient into its parents.  One tape per training example, thread-confined;
// shared parameter tensors are copied in at leaf creation.  Reductions and
// grad accumulation run in double regardless of T.
template <class T>
class Tape {
 public:
  using Id = int;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Id leaf(const Tensor<T>& value, bool requires_grad = true) {
    return push(Tensor<T>(value), requires_grad, nullptr);
  }
  Id constant(const Tensor<T>& value) { return leaf(value, false); }

  const Tensor<T>& val(Id id) const { return node(id).val; }
  const Tensor<T>& grad(Id id) const {
    const Node& n = node(id);
    if (!n.needs) throw shape_error("tape grad: node does not track gradients");
    return n.grad;
  }
  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    check_same(a, b, "add");
    Tensor<T> out = like(a);
    const Tensor<T>&va = val(a), &vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = T(double(va.v[i]) + double(vb.v[i]));
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Node& n) {
      accumulate(a, n.grad, 1.0);
      accumulate(b, n.grad, 1.0);
    });
  }

  Id sub(Id a, Id b) {
    check_same(a, b, "sub");
    Tensor<T> out = like(a);
    const Tensor<T>&va = val(a), &vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = T(double(va.v[i]) - double(vb.v[i]));
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Node& n) {
      accumulate(a, n.grad, 1.0);
      accumulate(b, n.grad, -1.0);
    });
  }

  Id mul(Id a, Id b) {
    check_same(a, b, "mul");
    Tensor<T> out = like(a);
    const Tensor<T>&va = val(a), &vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = T(double(va.v[i]) * double(vb.v[i]));
    return push(std::move(out), needs(a) || needs(b), [this, a, b](Node& n) {
      if (needs(a)) {
        Tensor<T>& ga = node(a).grad;
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga.v[i] += T(double(n.grad.v[i]) * double(vb.v[i]));
      }
      if (needs(b)) {
        Tensor<T>& gb = node(b).grad;
        const Tensor<T>& va = val(a);
        for (std::size_t i = 0; i < gb.size(); ++i)
          gb.v[i] += T(double(n.grad.v[i]) * double(va.v[i]));
      }
    });
  }

  // out = m*x + c
  Id affine(Id x, double m, double c) {
    Tensor<T> out = like(x);
    const Tensor<T>& vx = val(x);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = T(m * double(vx.v[i]) + c);
    return push(std::move(out), needs(x),
                [this, x, m](Node& n) { accumulate(x, n.grad, m); });
  }

  Id square(Id x) {
    Tensor<T> out = like(x);
    const Tensor<T>& vx = val(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = double(vx.v[i]);
      out.v[i] = T(v * v);
    }
    return push(std::move(out), needs(x), [this, x](Node& n) {
      Tensor<T>& gx = node(x).grad;
      const Tensor<T>& vx = val(x);
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx.v[i] += T(2.0 * double(vx.v[i]) * double(n.grad.v[i]));
    });
  }

  Id leaky_relu(Id x, double slope) {
    Tensor<T> out = like(x);
    const Tensor<T>& vx = val(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = double(vx.v[i]);
      out.v[i] = T(v > 0.0 ? v : slope * v);
    }
    return push(std::move(out), needs(x), [this, x, slope](Node& n) {
      Tensor<T>& gx = node(x).grad;
      const Tensor<T>& vx = val(x);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double f = double(vx.v[i]) > 0.0 ? 1.0 : slope;
        gx.v[i] += T(f * double(n.grad.v[i]));
      }
    });
  }

  // ---- shape ----

  Id concat_channels(const std::vector<Id>& parts) {
    if (parts.empty()) throw shape_error("concat: no inputs");
    const auto d = val(parts[0]).dims;
    int c_total = 0;
    bool any = false;
    for (Id p : parts) {
      if (val(p).dims != d) throw shape_error("concat: dim mismatch");
      c_total += val(p).channels;
      any = any || needs(p);
    }
    Tensor<T> out(c_total, d);
    int at = 0;
    for (Id p : parts) {
      const Tensor<T>& vp = val(p);
      std::copy(vp.v.begin(), vp.v.end(), out.chan(at));
      at += vp.channels;
    }
    return push(std::move(out), any, [this, parts](Node& n) {
      int at = 0;
      for (Id p : parts) {
        const int pc = val(p).channels;
        if (needs(p)) {
          Tensor<T>& gp = node(p).grad;
          const T* src = n.grad.chan(at);
          for (std::size_t i = 0; i < gp.size(); ++i) gp.v[i] += src[i];
        }
        at += pc;
      }
    });
  }

  // ---- reductions ----

  Id mean_reduce(Id x) {
    const Tensor<T>& vx = val(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) acc += double(vx.v[i]);
    Tensor<T> out = Tensor<T>::scalar(acc / double(vx.size()));
    return push(std::move(out), needs(x), [this, x](Node& n) {
      Tensor<T>& gx = node(x).grad;
      const double c = double(n.grad.v[0]) / double(gx.size());
      for (std::size_t i = 0; i < gx.size(); ++i) gx.v[i] += T(c);
    });
  }

  // channel-summed absolute value, one output channel
  Id abs_l1(Id x) {
    const Tensor<T>& vx = val(x);
    Tensor<T> out(1, vx.dims);
    const std::size_t sp = vx.spatial();
    std::vector<double> acc(sp, 0.0);
    for (int c = 0; c < vx.channels; ++c) {
      const T* src = vx.chan(c);
      for (std::size_t i = 0; i < sp; ++i) acc[i] += std::abs(double(src[i]));
    }
    for (std::size_t i = 0; i < sp; ++i) out.v[i] = T(acc[i]);
    return push(std::move(out), needs(x), [this, x](Node& n) {
      Tensor<T>& gx = node(x).grad;
      const Tensor<T>& vx = val(x);
      const std::size_t sp = vx.spatial();
      for (int c = 0; c < vx.channels; ++c) {
        T* g = gx.chan(c);
        const T* src = vx.chan(c);
        for (std::size_t i = 0; i < sp; ++i) {
          const double v = double(src[i]);
          const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
          g[i] += T(s * double(n.grad.v[i]));
        }
      }
    });
  }

  // ---- convolution ----

  // 3x3x3 kernel packed {cout*cin, 3,3,3}, zero padding = dilation, so
  // out dims = (n-1)/stride + 1.  bias < 0 means none.
  Id conv3d(Id x, Id w, Id bias, int stride, int dilation) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    if (vw.dims != std::array<int, 3>{3, 3, 3}) throw shape_error("conv3d: kernel must be 3x3x3");
    if (vw.channels % vx.channels != 0) throw shape_error("conv3d: kernel/input channel mismatch");
    if (stride < 1 || stride > 2) throw shape_error("conv3d: stride must be 1 or 2");
    if (dilation < 1) throw shape_error("conv3d: dilation must be >= 1");
    const int cin = vx.channels;
    const int cout = vw.channels / cin;
    if (bias >= 0 && (val(bias).channels != cout || val(bias).spatial() != 1))
      throw shape_error("conv3d: bias shape mismatch");
    const std::array<int, 3> nd = vx.dims;
    const std::array<int, 3> md = {(nd[0] - 1) / stride + 1, (nd[1] - 1) / stride + 1,
                                   (nd[2] - 1) / stride + 1};
    Tensor<T> out(cout, md);
    const std::size_t msp = out.spatial();
    std::vector<double> acc(msp);
    for (int co = 0; co < cout; ++co) {
      const double b0 = bias >= 0 ? double(val(bias).v[std::size_t(co)]) : 0.0;
      std::fill(acc.begin(), acc.end(), b0);
      for (int ci = 0; ci < cin; ++ci) {
        const T* xin = vx.chan(ci);
        const T* wk = vw.chan(co * cin + ci);
        conv_accum(acc.data(), xin, wk, nd, md, stride, dilation);
      }
      T* dst = out.chan(co);
      for (std::size_t i = 0; i < msp; ++i) dst[i] = T(acc[i]);
    }
    const bool any = needs(x) || needs(w) || (bias >= 0 && needs(bias));
    return push(std::move(out), any, [this, x, w, bias, stride, dilation, cin, cout, nd, md](Node& n) {
      conv_backward(n, x, w, bias, stride, dilation, cin, cout, nd, md);
    });
  }

  // ---- sampling ----

  // out[c](x) = feature[c] sampled at x + disp(x); differentiable in both.
  Id warp_diff(Id feature, Id disp) {
    const Tensor<T>& vf = val(feature);
    const Tensor<T>& vd = val(disp);
    if (vd.channels != 3) throw shape_error("warp_diff: displacement needs 3 channels");
    if (vf.dims != vd.dims) throw shape_error("warp_diff: dim mismatch");
    const auto d = vf.dims;
    Tensor<T> out(vf.channels, d);
    const T* dx = vd.chan(0);
    const T* dy = vd.chan(1);
    const T* dz = vd.chan(2);
    std::size_t idx = 0;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x, ++idx) {
          const auto c = detail::locate(double(x) + double(dx[idx]), double(y) + double(dy[idx]),
                                        double(z) + double(dz[idx]), d[0], d[1], d[2]);
          for (int ch = 0; ch < vf.channels; ++ch)
            out.chan(ch)[idx] = T(detail::cell_sample(vf.chan(ch), d[0], d[1], c));
        }
    return push(std::move(out), needs(feature) || needs(disp), [this, feature, disp](Node& n) {
      warp_backward(n, feature, disp);
    });
  }

  // trilinear x2 with displacement magnitudes doubled; mirrors the plain
  // field upsampling so transported fields agree bitwise in double
  Id upsample2x(Id disp) {
    const Tensor<T>& vd = val(disp);
    if (vd.channels != 3) throw shape_error("upsample2x: displacement needs 3 channels");
    const auto d = vd.dims;
    const std::array<int, 3> m = {d[0] * 2, d[1] * 2, d[2] * 2};
    Tensor<T> out(3, m);
    std::size_t idx = 0;
    for (int z = 0; z < m[2]; ++z)
      for (int y = 0; y < m[1]; ++y)
        for (int x = 0; x < m[0]; ++x, ++idx) {
          const auto c = detail::locate(0.5 * x - 0.25, 0.5 * y - 0.25, 0.5 * z - 0.25, d[0],
                                        d[1], d[2]);
          for (int a = 0; a < 3; ++a)
            out.chan(a)[idx] = T(2.0 * detail::cell_sample(vd.chan(a), d[0], d[1], c));
        }
    return push(std::move(out), needs(disp), [this, disp, d, m](Node& n) {
      Tensor<T>& gd = node(disp).grad;
      const std::size_t sp = std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]);
      std::vector<double> scratch(sp);
      for (int a = 0; a < 3; ++a) {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        const T* g = n.grad.chan(a);
        std::size_t idx = 0;
        for (int z = 0; z < m[2]; ++z)
          for (int y = 0; y < m[1]; ++y)
            for (int x = 0; x < m[0]; ++x, ++idx) {
              const auto c = detail::locate(0.5 * x - 0.25, 0.5 * y - 0.25, 0.5 * z - 0.25,
                                            d[0], d[1], d[2]);
              detail::cell_scatter(scratch.data(), d[0], d[1], c, 2.0 * double(g[idx]));
            }
        T* dst = gd.chan(a);
        for (std::size_t i = 0; i < sp; ++i) dst[i] += T(scratch[i]);
      }
    });
  }

  // mu + exp(logvar/2) * noise; noise is a fixed input, zero noise returns mu
  Id gaussian_sample(Id mu, Id logvar, const Tensor<T>& noise) {
    check_same(mu, logvar, "gaussian_sample");
    if (!val(mu).same_shape(noise)) throw shape_error("gaussian_sample: noise shape mismatch");
    Tensor<T> out = like(mu);
    const Tensor<T>&vm = val(mu), &vl = val(logvar);
    for (std::size_t i = 0; i < out.size(); ++i)
      out.v[i] = T(double(vm.v[i]) + std::exp(0.5 * double(vl.v[i])) * double(noise.v[i]));
    auto noise_copy = std::make_shared<Tensor<T>>(noise);
    return push(std::move(out), needs(mu) || needs(logvar),
                [this, mu, logvar, noise_copy](Node& n) {
                  accumulate(mu, n.grad, 1.0);
                  if (needs(logvar)) {
                    Tensor<T>& gl = node(logvar).grad;
                    const Tensor<T>& vl = val(logvar);
                    for (std::size_t i = 0; i < gl.size(); ++i)
                      gl.v[i] += T(0.5 * std::exp(0.5 * double(vl.v[i])) *
                                   double(noise_copy->v[i]) * double(n.grad.v[i]));
                  }
                });
  }

  // ---- fused loss heads (scalar outputs) ----

  // mean squared windowed correlation of two single-channel tensors
  Id lncc_sq(Id a, Id b, int window) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.channels != 1 || vb.channels != 1) throw shape_error("lncc: single channel expected");
    if (va.dims != vb.dims) throw shape_error("lncc: dim mismatch");
    const int d[3] = {va.dims[0], va.dims[1], va.dims[2]};
    auto cache = std::make_shared<detail::LnccCache>();
    const double value = detail::lncc_mean_sq(va.chan(0), vb.chan(0), d, window, cache.get());
    return push(Tensor<T>::scalar(value), needs(a) || needs(b), [this, a, b, cache](Node& n) {
      const Tensor<T>& va = val(a);
      const Tensor<T>& vb = val(b);
      const int d[3] = {va.dims[0], va.dims[1], va.dims[2]};
      T* ga = needs(a) ? node(a).grad.chan(0) : nullptr;
      T* gb = needs(b) ? node(b).grad.chan(0) : nullptr;
      detail::lncc_backward(va.chan(0), vb.chan(0), ga, gb, d, *cache, double(n.grad.v[0]));
    });
  }

  // mean over voxels of the nine squared partials of a 3-channel field
  Id diffusion(Id u) {
    const Tensor<T>& vu = val(u);
    if (vu.channels != 3) throw shape_error("diffusion: field needs 3 channels");
    const int d[3] = {vu.dims[0], vu.dims[1], vu.dims[2]};
    const T* p[3] = {vu.chan(0), vu.chan(1), vu.chan(2)};
    const double value = detail::diffusion_mean(p, d);
    return push(Tensor<T>::scalar(value), needs(u), [this, u](Node& n) {
      const Tensor<T>& vu = val(u);
      const int d[3] = {vu.dims[0], vu.dims[1], vu.dims[2]};
      const T* p[3] = {vu.chan(0), vu.chan(1), vu.chan(2)};
      Tensor<T>& gu = node(u).grad;
      T* g[3] = {gu.chan(0), gu.chan(1), gu.chan(2)};
      detail::diffusion_backward(p, g, d, double(n.grad.v[0]));
    });
  }

  // mean over interior voxels of max(0, -det(I + grad u)), unscaled
  Id hinge_neg_det(Id u) {
    const Tensor<T>& vu = val(u);
    if (vu.channels != 3) throw shape_error("hinge: field needs 3 channels");
    const int d[3] = {vu.dims[0], vu.dims[1], vu.dims[2]};
    const T* p[3] = {vu.chan(0), vu.chan(1), vu.chan(2)};
    const double value = detail::hinge_mean(p, d);
    return push(Tensor<T>::scalar(value), needs(u), [this, u](Node& n) {
      const Tensor<T>& vu = val(u);
      const int d[3] = {vu.dims[0], vu.dims[1], vu.dims[2]};
      const T* p[3] = {vu.chan(0), vu.chan(1), vu.chan(2)};
      Tensor<T>& gu = node(u).grad;
      T* g[3] = {gu.chan(0), gu.chan(1), gu.chan(2)};
      detail::hinge_backward(p, g, d, double(n.grad.v[0]));
    });
  }

  // 0.5 * sum(exp(lv) + mu^2 - lv - 1), the diagonal-Gaussian KL to N(0, I)
  Id kl_diag(Id mu, Id logvar) {
    check_same(mu, logvar, "kl_diag");
    const Tensor<T>&vm = val(mu), &vl = val(logvar);
    double acc = 0.0;
    for (std::size_t i = 0; i < vm.size(); ++i) {
      const double m = double(vm.v[i]), l = double(vl.v[i]);
      acc += std::exp(l) + m * m - l - 1.0;
    }
    return push(Tensor<T>::scalar(0.5 * acc), needs(mu) || needs(logvar),
                [this, mu, logvar](Node& n) {
                  const double c = double(n.grad.v[0]);
                  const Tensor<T>&vm = val(mu), &vl = val(logvar);
                  if (needs(mu)) {
                    Tensor<T>& gm = node(mu).grad;
                    for (std::size_t i = 0; i < gm.size(); ++i)
                      gm.v[i] += T(c * double(vm.v[i]));
                  }
                  if (needs(logvar)) {
                    Tensor<T>& gl = node(logvar).grad;
                    for (std::size_t i = 0; i < gl.size(); ++i)
                      gl.v[i] += T(c * 0.5 * (std::exp(double(vl.v[i])) - 1.0));
                  }
                });
  }

  // ---- backward ----

  void backward(Id root, double seed = 1.0) {
    if (!val(root).is_scalar()) throw shape_error("tape backward: root must be scalar");
    for (Node& n : nodes_) {
      if (!n.needs) continue;
      if (n.grad.size() != n.val.size()) n.grad = Tensor<T>(n.val.channels, n.val.dims);
      else std::fill(n.grad.v.begin(), n.grad.v.end(), T(0));
    }
    Node& r = node(root);
    if (!r.needs) return;  // nothing upstream requires gradients
    r.grad.v[0] = T(seed);
    for (Id id = Id(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[std::size_t(id)];
      if (n.needs && n.back) n.back(n);
    }
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Node&)> back;  // scatters this node's grad into parents
    bool needs = false;
  };

  std::vector<Node> nodes_;

  Node& node(Id id) { return nodes_.at(std::size_t(id)); }
  const Node& node(Id id) const { return nodes_.at(std::size_t(id)); }
  bool needs(Id id) const { return node(id).needs; }
  Tensor<T> like(Id id) const { return Tensor<T>(val(id).channels, val(id).dims); }

  void check_same(Id a, Id b, const char* what) {
    if (!val(a).same_shape(val(b))) throw shape_error(std::string(what) + ": shape mismatch");
  }

  Id push(Tensor<T>&& value, bool needs_grad, std::function<void(Node&)> back) {
    Node n;
    n.val = std::move(value);
    n.needs = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Id(nodes_.size()) - 1;
  }

  void accumulate(Id target, const Tensor<T>& g, double scale) {
    if (!needs(target)) return;
    Tensor<T>& dst = node(target).grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst.v[i] += T(scale * double(g.v[i]));
  }

  // valid output range of one kernel tap; in-bounds input coordinate is
  // stride*o + off for o in [lo, hi]
  struct TapRange {
    int lo[3], hi[3], off[3];
    bool empty = false;
  };

  static TapRange tap_range(int kx, int ky, int kz, const std::array<int, 3>& nd,
                            const std::array<int, 3>& md, int stride, int dilation) {
    TapRange r;
    const int k[3] = {kx, ky, kz};
    for (int a = 0; a < 3; ++a) {
      r.off[a] = dilation * (k[a] - 1);
      r.lo[a] = r.off[a] < 0 ? (-r.off[a] + stride - 1) / stride : 0;
      const int span = nd[a] - 1 - r.off[a];
      r.hi[a] = span < 0 ? -1 : std::min(span / stride, md[a] - 1);
      if (r.lo[a] > r.hi[a]) r.empty = true;
    }
    return r;
  }

  static std::size_t tap_input_base(const TapRange& r, int oy, int oz,
                                    const std::array<int, 3>& nd, int stride) {
    const int ix0 = stride * r.lo[0] + r.off[0];
    const int iy = stride * oy + r.off[1];
    const int iz = stride * oz + r.off[2];
    return std::size_t(ix0) +
           std::size_t(nd[0]) * (std::size_t(iy) + std::size_t(nd[1]) * std::size_t(iz));
  }

  // inner kernel: acc[out] += w * x[in] over the valid output range of one tap
  static void conv_accum(double* acc, const T* xin, const T* wk, const std::array<int, 3>& nd,
                         const std::array<int, 3>& md, int stride, int dilation) {
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double wv = double(wk[(kz * 3 + ky) * 3 + kx]);
          if (wv == 0.0) continue;
          const TapRange r = tap_range(kx, ky, kz, nd, md, stride, dilation);
          if (r.empty) continue;
          for (int oz = r.lo[2]; oz <= r.hi[2]; ++oz)
            for (int oy = r.lo[1]; oy <= r.hi[1]; ++oy) {
              const std::size_t obase =
                  std::size_t(md[0]) * (std::size_t(oy) + std::size_t(md[1]) * std::size_t(oz));
              std::size_t ii = tap_input_base(r, oy, oz, nd, stride);
              for (int ox = r.lo[0]; ox <= r.hi[0]; ++ox, ii += std::size_t(stride))
                acc[obase + std::size_t(ox)] += wv * double(xin[ii]);
            }
        }
  }

  void conv_backward(Node& n, Id x, Id w, Id bias, int stride, int dilation, int cin, int cout,
                     const std::array<int, 3>& nd, const std::array<int, 3>& md) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const std::size_t msp = n.val.spatial();
    if (bias >= 0 && needs(bias)) {
      Tensor<T>& gb = node(bias).grad;
      for (int co = 0; co < cout; ++co) {
        const T* g = n.grad.chan(co);
        double acc = 0.0;
        for (std::size_t i = 0; i < msp; ++i) acc += double(g[i]);
        gb.v[std::size_t(co)] += T(acc);
      }
    }
    if (needs(w)) {
      Tensor<T>& gw = node(w).grad;
      for (int co = 0; co < cout; ++co) {
        const T* g = n.grad.chan(co);
        for (int ci = 0; ci < cin; ++ci) {
          const T* xin = vx.chan(ci);
          T* wg = gw.chan(co * cin + ci);
          for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const TapRange r = tap_range(kx, ky, kz, nd, md, stride, dilation);
                if (r.empty) continue;
                double acc = 0.0;
                for (int oz = r.lo[2]; oz <= r.hi[2]; ++oz)
                  for (int oy = r.lo[1]; oy <= r.hi[1]; ++oy) {
                    const std::size_t obase = std::size_t(md[0]) * (std::size_t(oy) +
                                              std::size_t(md[1]) * std::size_t(oz));
                    std::size_t ii = tap_input_base(r, oy, oz, nd, stride);
                    for (int ox = r.lo[0]; ox <= r.hi[0]; ++ox, ii += std::size_t(stride))
                      acc += double(g[obase + std::size_t(ox)]) * double(xin[ii]);
                  }
                wg[(kz * 3 + ky) * 3 + kx] += T(acc);
              }
        }
      }
    }
    if (needs(x)) {
      Tensor<T>& gx = node(x).grad;
      const std::size_t nsp = vx.spatial();
      std::vector<double> scratch(nsp);
      for (int ci = 0; ci < cin; ++ci) {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        for (int co = 0; co < cout; ++co) {
          const T* g = n.grad.chan(co);
          const T* wk = vw.chan(co * cin + ci);
          for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const double wv = double(wk[(kz * 3 + ky) * 3 + kx]);
                if (wv == 0.0) continue;
                const TapRange r = tap_range(kx, ky, kz, nd, md, stride, dilation);
                if (r.empty) continue;
                for (int oz = r.lo[2]; oz <= r.hi[2]; ++oz)
                  for (int oy = r.lo[1]; oy <= r.hi[1]; ++oy) {
                    const std::size_t obase = std::size_t(md[0]) * (std::size_t(oy) +
                                              std::size_t(md[1]) * std::size_t(oz));
                    std::size_t ii = tap_input_base(r, oy, oz, nd, stride);
                    for (int ox = r.lo[0]; ox <= r.hi[0]; ++ox, ii += std::size_t(stride))
                      scratch[ii] += wv * double(g[obase + std::size_t(ox)]);
                  }
              }
        }
        T* dst = gx.chan(ci);
        for (std::size_t i = 0; i < nsp; ++i) dst[i] += T(scratch[i]);
      }
    }
  }

  void warp_backward(Node& n, Id feature, Id disp) {
    const Tensor<T>& vf = val(feature);
    const Tensor<T>& vd = val(disp);
    const auto d = vf.dims;
    const std::size_t sp = vf.spatial();
    const T* dx = vd.chan(0);
    const T* dy = vd.chan(1);
    const T* dz = vd.chan(2);
    const bool want_f = needs(feature);
    const bool want_d = needs(disp);
    std::vector<double> fscratch;
    if (want_f) fscratch.assign(vf.size(), 0.0);
    Tensor<T>* gd = want_d ? &node(disp).grad : nullptr;
    std::size_t idx = 0;
    for (int z = 0; z < d[2]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[0]; ++x, ++idx) {
          const auto c = detail::locate(double(x) + double(dx[idx]), double(y) + double(dy[idx]),
                                        double(z) + double(dz[idx]), d[0], d[1], d[2]);
          double daxis[3] = {0.0, 0.0, 0.0};
          for (int ch = 0; ch < vf.channels; ++ch) {
            const double g = double(n.grad.chan(ch)[idx]);
            if (g == 0.0) continue;
            if (want_f)
              detail::cell_scatter(fscratch.data() + std::size_t(ch) * sp, d[0], d[1], c, g);
            if (want_d) {
              double pd[3];
              detail::cell_partials(vf.chan(ch), d[0], d[1], c, pd);
              for (int a = 0; a < 3; ++a) daxis[a] += g * pd[a];
            }
          }
          if (want_d)
            for (int a = 0; a < 3; ++a) gd->chan(a)[idx] += T(daxis[a]);
        }
    if (want_f) {
      Tensor<T>& gf = node(feature).grad;
      for (std::size_t i = 0; i < gf.size(); ++i) gf.v[i] += T(fscratch[i]);
    }
  }
};

}  // namespace svfreg
