#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "svfreg/errors.hpp"
#include "svfreg/grid.hpp"
#include "svfreg/metrics.hpp"
#include "svfreg/networks.hpp"
#include "svfreg/rng.hpp"
#include "svfreg/tape.hpp"
#include "svfreg/tensor.hpp"

namespace svfreg {

struct CascadeOptions {
  bool sample_features = true;  // stochastic latents for training, means for inference
  bool full_res_output = true;  // upsample the finest field back to input resolution
  std::uint64_t noise_seed = 0;

  static CascadeOptions inference() { return CascadeOptions{false, true, 0}; }
};

// Box-downsampled image levels, finest first; level k halves k+1 times.
inline std::vector<Volume> image_levels(const Volume& vol, int k) {
  std::vector<Volume> out;
  out.reserve(std::size_t(k));
  Volume cur = vol;
  for (int i = 0; i < k; ++i) {
    cur = downsample_volume(cur);
    out.push_back(cur);
  }
  return out;
}

template <class T>
struct LevelFeatures {
  typename Tape<T>::Id mu_s = -1, lv_s = -1, z_s = -1;
  typename Tape<T>::Id mu_t = -1, lv_t = -1, z_t = -1;
  GridMeta meta;
};

template <class T>
struct StageTrace {
  typename Tape<T>::Id phi_prev = -1, u = -1, v = -1, phi = -1;
  typename Tape<T>::Id kl = -1, ncc = -1, diff = -1, hinge = -1, term = -1;  // loss graphs only
  int window = 0;
  GridMeta meta;
};

template <class T>
struct GraphResult {
  std::vector<LevelFeatures<T>> levels;  // finest first
  std::vector<StageTrace<T>> stages;     // execution order, coarsest first
  typename Tape<T>::Id final_phi = -1;
  typename Tape<T>::Id warped = -1;
  typename Tape<T>::Id total = -1;  // loss graphs only
  GridMeta final_meta;
};

// Shared wiring for registration and training graphs.  Feature levels are
// encoded finest-first (each trunk consumes the previous level's latent);
// stages run coarsest-first, transporting the integrated field up one level
// between stages.  When lambda_ids is given (flat order: sta_0..K-1, mat,
// reg, jac) the per-stage loss terms and their sum are built on the tape.
template <class T>
GraphResult<T> build_cascade_graph(Tape<T>& tape, const Volume& s, const Volume& t,
                                   const BoundParams<T>& bp, const NetConfig& cfg,
                                   const CascadeOptions& opt,
                                   const std::vector<typename Tape<T>::Id>* lambda_ids) {
  using Id = typename Tape<T>::Id;
  cfg.validate();
  if (s.meta != t.meta) throw shape_error("cascade: source/target meta mismatch");
  const int k_stages = cfg.stages;
  for (int a = 0; a < 3; ++a)
    if (s.meta.dims[a] % (1 << k_stages) != 0)
      throw shape_error("cascade: dims must be divisible by 2^stages");
  if (lambda_ids && int(lambda_ids->size()) != k_stages + 3)
    throw shape_error("cascade: lambda id count mismatch");

  const std::vector<LayerDesc> layers = cfg.layers();
  auto layer = [&](const std::string& name) -> const LayerDesc& {
    for (const LayerDesc& ld : layers)
      if (ld.name == name) return ld;
    throw shape_error("cascade: missing layer " + name);
  };

  GraphResult<T> g;
  const std::vector<Volume> src_levels = image_levels(s, k_stages);
  const std::vector<Volume> tgt_levels = image_levels(t, k_stages);

  const Id src_full = tape.constant(tensor_from_volume<T>(s));
  const Id tgt_full = tape.constant(tensor_from_volume<T>(t));
  Id in_s = src_full;
  Id in_t = tgt_full;
  for (int k = 0; k < k_stages; ++k) {
    LevelFeatures<T> lf;
    lf.meta = src_levels[std::size_t(k)].meta;
    const LayerDesc& trunk = layer("wF" + std::to_string(k) + "_trunk");
    const LayerDesc& mu_head = layer("wF" + std::to_string(k) + "_mu");
    const LayerDesc& lv_head = layer("wF" + std::to_string(k) + "_lv");
    auto encode = [&](Id input, bool is_target, Id* mu, Id* lv, Id* z) {
      const Id h = conv_layer(tape, bp, trunk, input);
      *mu = conv_layer(tape, bp, mu_head, h);
      *lv = conv_layer(tape, bp, lv_head, h);
      if (opt.sample_features) {
        Tensor<T> noise(cfg.channels[std::size_t(k)], lf.meta.dims);
        Rng rng(seed_mix(opt.noise_seed, std::uint64_t(2 * k + (is_target ? 1 : 0))));
        for (auto& nv : noise.v) nv = T(rng.normal());
        *z = tape.gaussian_sample(*mu, *lv, noise);
      } else {
        *z = *mu;
      }
    };
    encode(in_s, false, &lf.mu_s, &lf.lv_s, &lf.z_s);
    encode(in_t, true, &lf.mu_t, &lf.lv_t, &lf.z_t);
    in_s = lf.z_s;
    in_t = lf.z_t;
    g.levels.push_back(lf);
  }

  Id phi_carry = -1;
  Id total = -1;
  for (int j = 0; j < k_stages; ++j) {
    const int l = k_stages - 1 - j;
    const LevelFeatures<T>& lf = g.levels[std::size_t(l)];
    StageTrace<T> st;
    st.meta = lf.meta;
    st.phi_prev = j == 0 ? tape.constant(Tensor<T>(3, st.meta.dims)) : tape.upsample2x(phi_carry);
    const Id warped_fs = tape.warp_diff(lf.z_s, st.phi_prev);
    const Id err = tape.abs_l1(tape.sub(lf.z_t, warped_fs));
    const Id inp = tape.concat_channels({warped_fs, lf.z_t, err, st.phi_prev});
    const std::string mn = "wM" + std::to_string(j);
    Id u = conv_layer(tape, bp, layer(mn + "_c0"), inp);
    u = conv_layer(tape, bp, layer(mn + "_c1"), u);
    u = conv_layer(tape, bp, layer(mn + "_c2"), u);
    st.u = u;
    const std::string rn = "wR" + std::to_string(j);
    Id rv = conv_layer(tape, bp, layer(rn + "_c0"), u);
    rv = conv_layer(tape, bp, layer(rn + "_c1"), rv);
    rv = conv_layer(tape, bp, layer(rn + "_c2"), rv);
    st.v = tape.add(u, rv);  // residual around the matching field
    Id d = tape.affine(st.v, std::ldexp(1.0, -cfg.ss_steps), 0.0);
    for (int sq = 0; sq < cfg.ss_steps; ++sq) d = tape.add(tape.warp_diff(d, d), d);
    st.phi = d;
    phi_carry = d;

    if (lambda_ids) {
      const Id lam_sta = (*lambda_ids)[std::size_t(j)];
      const Id lam_mat = (*lambda_ids)[std::size_t(k_stages)];
      const Id lam_reg = (*lambda_ids)[std::size_t(k_stages) + 1];
      const Id lam_jac = (*lambda_ids)[std::size_t(k_stages) + 2];
      const Id kl = tape.add(tape.kl_diag(lf.mu_s, lf.lv_s), tape.kl_diag(lf.mu_t, lf.lv_t));
      const int min_dim = std::min({st.meta.dims[0], st.meta.dims[1], st.meta.dims[2]});
      st.window = stage_window(k_stages - 1 - j, min_dim);
      const Id warped_img =
          tape.warp_diff(tape.constant(tensor_from_volume<T>(src_levels[std::size_t(l)])), st.phi);
      const Id ncc = tape.lncc_sq(
          warped_img, tape.constant(tensor_from_volume<T>(tgt_levels[std::size_t(l)])), st.window);
      const Id deficit = tape.affine(ncc, -1.0, 1.0);
      const Id diff = tape.diffusion(st.v);
      const Id hinge = tape.hinge_neg_det(st.v);
      const Id reg = tape.add(diff, tape.mul(lam_jac, hinge));
      const Id inner = tape.add(kl, tape.add(tape.mul(lam_mat, deficit), tape.mul(lam_reg, reg)));
      const Id term = tape.mul(lam_sta, inner);
      st.kl = kl;
      st.ncc = ncc;
      st.diff = diff;
      st.hinge = hinge;
      st.term = term;
      total = j == 0 ? term : tape.add(total, term);
    }
    g.stages.push_back(st);
  }
  g.total = total;

  if (opt.full_res_output) {
    g.final_phi = tape.upsample2x(phi_carry);
    g.final_meta = s.meta;
    g.warped = tape.warp_diff(src_full, g.final_phi);
  } else {
    g.final_phi = phi_carry;
    g.final_meta = g.stages.back().meta;
    g.warped = tape.warp_diff(
        tape.constant(tensor_from_volume<T>(src_levels[0])), g.final_phi);
  }
  return g;
}

struct RegistrationResult {
  std::vector<VectorField> u, v, phi;  // execution order, coarsest stage first
  VectorField final_phi;
  Volume warped;
};

template <class T>
RegistrationResult register_forward(const Volume& s, const Volume& t, const ParamSet<T>& params,
                                    const NetConfig& cfg,
                                    const CascadeOptions& opt = CascadeOptions::inference()) {
  Tape<T> tape;
  const BoundParams<T> bp = bind_params(tape, params, false);
  const GraphResult<T> g = build_cascade_graph(tape, s, t, bp, cfg, opt, nullptr);
  RegistrationResult r;
  for (const StageTrace<T>& st : g.stages) {
    r.u.push_back(field_from_tensor(tape.val(st.u), st.meta));
    r.v.push_back(field_from_tensor(tape.val(st.v), st.meta));
    r.phi.push_back(field_from_tensor(tape.val(st.phi), st.meta));
  }
  r.final_phi = field_from_tensor(tape.val(g.final_phi), g.final_meta);
  r.warped = volume_from_tensor(tape.val(g.warped), g.final_meta);
  return r;
}

}  // namespace svfreg
