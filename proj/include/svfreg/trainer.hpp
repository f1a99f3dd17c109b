#pragma once
#include <atomic>
#include <cstdint>
#include <exception>
#include <thread>
#include <utility>
#include <vector>

#include "svfreg/cascade.hpp"
#include "svfreg/dataset.hpp"
#include "svfreg/errors.hpp"
#include "svfreg/grid.hpp"
#include "svfreg/metrics.hpp"
#include "svfreg/networks.hpp"
#include "svfreg/training.hpp"

namespace svfreg {

struct TrainSetup {
  NetConfig net;
  int batch = 2;
  std::uint64_t seed = 0;  // keys the stochastic latents
  int threads = 1;
  int val_window = 9;  // local correlation window of the validation objective
};

// Runs fn(0..n-1); slots are independent, so results must be written into
// slot-indexed storage and merged by the caller in slot order.
template <class Fn>
void parallel_slots(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) first_error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failed) std::rethrow_exception(first_error);
}

// Bridges the cascade to the bilevel optimizer over flat coordinates:
// x is the hyper vector (sta_0..K-1, mat, reg, jac), y the flattened
// parameter set.  The lower objective is the batch-mean training loss with
// stochastic latents keyed by (seed, iter, slot), so repeated evaluation at
// the same iteration replays the same draw.  The upper objective is the mean
// validation matching deficit at full resolution with mean features and no
// hyper dependence.
template <class T>
class RegistrationProblem {
 public:
  RegistrationProblem(std::vector<RegPair> train, std::vector<RegPair> val, TrainSetup setup)
      : train_(std::move(train)), val_(std::move(val)), setup_(std::move(setup)) {
    setup_.net.validate();
    if (train_.empty()) throw data_error("training split is empty");
    if (val_.empty()) throw data_error("validation split is empty");
    if (setup_.batch < 1) throw data_error("batch must be at least 1");
    if (setup_.val_window < 3 || setup_.val_window % 2 == 0)
      throw data_error("validation window must be odd and at least 3");
    template_ = init_params<T>(setup_.net, 0);
  }

  std::size_t n_params() const { return template_.coord_count(); }
  std::size_t n_hyper() const { return std::size_t(setup_.net.stages) + 3; }

  double lower_objective(const std::vector<double>& x, const std::vector<double>& y, long iter,
                         std::vector<double>* gy) const {
    const ParamSet<T> params = materialize(y);
    const int b_count = setup_.batch;
    std::vector<double> losses(std::size_t(b_count), 0.0);
    auto grads = std::vector<std::vector<double>>(std::size_t(b_count));

    parallel_slots(b_count, setup_.threads, [&](int b) {
      const RegPair& pair = pick(iter, b);
      Tape<T> tape;
      const BoundParams<T> bp = bind_params(tape, params, gy != nullptr);
      const std::vector<typename Tape<T>::Id> lam = constant_lambdas(tape, x);
      CascadeOptions opt;
      opt.sample_features = true;
      opt.full_res_output = false;
      opt.noise_seed = noise_key(iter, b);
      const GraphResult<T> g =
          build_cascade_graph(tape, pair.source, pair.target, bp, setup_.net, opt, &lam);
      losses[std::size_t(b)] = tape.val(g.total).item();
      if (gy) {
        tape.backward(g.total);
        grads[std::size_t(b)] = collect_param_grads(tape, bp);
      }
    });

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= double(b_count);
    if (gy) {
      gy->assign(n_params(), 0.0);
      for (int b = 0; b < b_count; ++b)
        for (std::size_t i = 0; i < gy->size(); ++i) (*gy)[i] += grads[std::size_t(b)][i];
      for (double& v : *gy) v /= double(b_count);
    }
    return loss;
  }

  // d(lower)/d(hyper) on the same batch and latent draw as lower_objective.
  // The parameters are frozen, so the backward sweep only touches the scalar
  // loss assembly.
  void lower_hyper_grad(const std::vector<double>& x, const std::vector<double>& y, long iter,
                        std::vector<double>* gx) const {
    const ParamSet<T> params = materialize(y);
    const int b_count = setup_.batch;
    auto grads = std::vector<std::vector<double>>(std::size_t(b_count));

    parallel_slots(b_count, setup_.threads, [&](int b) {
      const RegPair& pair = pick(iter, b);
      Tape<T> tape;
      const BoundParams<T> bp = bind_params(tape, params, false);
      std::vector<typename Tape<T>::Id> lam;
      lam.reserve(x.size());
      for (double v : x) lam.push_back(tape.leaf(Tensor<T>::scalar(v), true));
      CascadeOptions opt;
      opt.sample_features = true;
      opt.full_res_output = false;
      opt.noise_seed = noise_key(iter, b);
      const GraphResult<T> g =
          build_cascade_graph(tape, pair.source, pair.target, bp, setup_.net, opt, &lam);
      tape.backward(g.total);
      std::vector<double>& gb = grads[std::size_t(b)];
      gb.reserve(lam.size());
      for (auto id : lam) gb.push_back(double(tape.grad(id).v[0]));
    });

    gx->assign(n_hyper(), 0.0);
    for (int b = 0; b < b_count; ++b)
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += grads[std::size_t(b)][i];
    for (double& v : *gx) v /= double(b_count);
  }

  double upper_objective(const std::vector<double>& y, std::vector<double>* gy) const {
    const ParamSet<T> params = materialize(y);
    const int n = int(val_.size());
    std::vector<double> losses(std::size_t(n), 0.0);
    auto grads = std::vector<std::vector<double>>(std::size_t(n));

    parallel_slots(n, setup_.threads, [&](int i) {
      const RegPair& pair = val_[std::size_t(i)];
      Tape<T> tape;
      const BoundParams<T> bp = bind_params(tape, params, gy != nullptr);
      const GraphResult<T> g = build_cascade_graph(tape, pair.source, pair.target, bp, setup_.net,
                                                   CascadeOptions::inference(), nullptr);
      const auto& dims = g.final_meta.dims;
      const int w = stage_window((setup_.val_window - 3) / 2, std::min({dims[0], dims[1], dims[2]}));
      const auto ncc =
          tape.lncc_sq(g.warped, tape.constant(tensor_from_volume<T>(pair.target)), w);
      const auto deficit = tape.affine(ncc, -1.0, 1.0);
      losses[std::size_t(i)] = tape.val(deficit).item();
      if (gy) {
        tape.backward(deficit);
        grads[std::size_t(i)] = collect_param_grads(tape, bp);
      }
    });

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= double(n);
    if (gy) {
      gy->assign(n_params(), 0.0);
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < gy->size(); ++j) (*gy)[j] += grads[std::size_t(i)][j];
      for (double& v : *gy) v /= double(n);
    }
    return loss;
  }

  // Closures reference this problem; it must outlive the returned object.
  BilevelProblem bilevel() const {
    BilevelProblem p;
    p.n_lower = n_params();
    p.n_upper = n_hyper();
    p.lower = [this](const std::vector<double>& x, const std::vector<double>& y, long iter,
                     std::vector<double>* gy) { return lower_objective(x, y, iter, gy); };
    p.lower_grad_x = [this](const std::vector<double>& x, const std::vector<double>& y, long iter,
                            std::vector<double>* gx) { lower_hyper_grad(x, y, iter, gx); };
    p.upper = [this](const std::vector<double>&, const std::vector<double>& y,
                     std::vector<double>* gy) { return upper_objective(y, gy); };
    // no explicit hyper term in the validation loss
    return p;
  }

  const TrainSetup& setup() const { return setup_; }
  const ParamSet<T>& param_template() const { return template_; }

 private:
  const RegPair& pick(long iter, int b) const {
    const std::size_t idx =
        (std::size_t(iter - 1) * std::size_t(setup_.batch) + std::size_t(b)) % train_.size();
    return train_[idx];
  }

  std::uint64_t noise_key(long iter, int b) const {
    return seed_mix(seed_mix(setup_.seed, std::uint64_t(iter)), std::uint64_t(b));
  }

  ParamSet<T> materialize(const std::vector<double>& y) const {
    ParamSet<T> ps = template_;
    unflatten(y, &ps);
    return ps;
  }

  std::vector<typename Tape<T>::Id> constant_lambdas(Tape<T>& tape,
                                                     const std::vector<double>& x) const {
    std::vector<typename Tape<T>::Id> lam;
    lam.reserve(x.size());
    for (double v : x) lam.push_back(tape.constant(Tensor<T>::scalar(v)));
    return lam;
  }

  static std::vector<double> collect_param_grads(const Tape<T>& tape, const BoundParams<T>& bp) {
    std::vector<double> out;
    for (const auto& [name, id] : bp.ids)
      for (const T& v : tape.grad(id).v) out.push_back(double(v));
    return out;
  }

  std::vector<RegPair> train_, val_;
  TrainSetup setup_;
  ParamSet<T> template_;
};

}  // namespace svfreg
