#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <svfreg/cascade.hpp>
#include <svfreg/dataset.hpp>
#include <svfreg/diffeo.hpp>
#include <svfreg/errors.hpp>
#include <svfreg/gradcheck.hpp>
#include <svfreg/io.hpp>
#include <svfreg/metrics.hpp>
#include <svfreg/networks.hpp>
#include <svfreg/trainer.hpp>
#include <svfreg/training.hpp>

namespace {

using namespace svfreg;
namespace fs = std::filesystem;

struct Globals {
  std::uint64_t seed = 0;
  std::string precision = "double";
  int stages = 3;
  int threads = 1;
  bool half_res = false;
};

// 8 channels at the finest level, 16 at every coarser one
NetConfig net_for(int stages) {
  NetConfig net;
  net.stages = stages;
  net.channels.assign(std::size_t(stages), 16);
  net.channels[0] = 8;
  net.validate();
  return net;
}

int clamp_window(int want, const GridMeta& meta) {
  return stage_window((want - 3) / 2, std::min({meta.dims[0], meta.dims[1], meta.dims[2]}));
}

// ---- synth ----

struct SynthFlags {
  std::string out;
  int pairs = 20;
  int size = 32;
  int class_count = 4;
  double magnitude = 3.0;
  double smoothness = 5.0;
  double jitter = 0.02;
};

int run_synth(const Globals& g, const SynthFlags& f) {
  SynthConfig cfg;
  cfg.dims = {f.size, f.size, f.size};
  cfg.class_count = f.class_count;
  cfg.deform_magnitude = f.magnitude;
  cfg.deform_smoothness = f.smoothness;
  cfg.intensity_jitter = f.jitter;
  const Dataset ds = generate_dataset(f.out, cfg, f.pairs, g.seed);
  std::printf("pairs=%zu\nroot=%s\n", ds.pairs.size(), ds.root.string().c_str());
  return 0;
}

// ---- train / tune ----

struct TrainFlags {
  std::string data, out;
  long budget = 300;
  int batch = 2;
  double lower_lr = 1e-3;
  int log_every = 10;
  std::vector<double> lambda_sta;  // one per stage; filled with the default when empty
  double lambda_mat = 1e4;
  double lambda_reg = 1e3;
  double lambda_jac = 10.0;
  std::vector<double> split = {0.6, 0.2, 0.2};
  // tune only
  double upper_lr = 1e-2;
  int upper_every = 1;
  std::string eps_mode = "lr";
  double eps = 1e-3;
};

template <class T>
int run_train(const Globals& g, const TrainFlags& f, bool tuned) {
  const Dataset ds = open_dataset(f.data);
  if (ds.pairs.empty()) throw data_error("dataset has no pairs");
  const SplitIndices si =
      split(int(ds.pairs.size()), {f.split[0], f.split[1], f.split[2]}, g.seed);
  if (si.train.empty()) throw data_error("training split is empty");
  if (si.val.empty()) throw data_error("validation split is empty");

  std::vector<RegPair> train_pairs, val_pairs;
  for (int i : si.train) train_pairs.push_back(load_pair(ds, i));
  for (int i : si.val) val_pairs.push_back(load_pair(ds, i));

  TrainSetup setup;
  setup.net = net_for(g.stages);
  setup.batch = f.batch;
  setup.seed = g.seed;
  setup.threads = g.threads;
  const RegistrationProblem<T> prob(std::move(train_pairs), std::move(val_pairs), setup);
  const BilevelProblem bp = prob.bilevel();

  HyperParams h;
  h.lambda_sta = f.lambda_sta;
  if (h.lambda_sta.empty()) h.lambda_sta.assign(std::size_t(g.stages), 1e-4);
  h.lambda_mat = f.lambda_mat;
  h.lambda_reg = f.lambda_reg;
  h.lambda_jac = f.lambda_jac;
  h.validate(g.stages);

  ParamSet<T> params = init_params<T>(setup.net, g.seed);
  const std::vector<double> y0 = flatten(params);

  TuneConfig tc;
  tc.budget = f.budget;
  tc.lower_lr = f.lower_lr;
  tc.log_every = f.log_every;
  tc.upper_lr = f.upper_lr;
  tc.upper_every = f.upper_every;
  tc.eps_value = f.eps;
  if (f.eps_mode == "lr")
    tc.eps_mode = EpsMode::upper_lr;
  else if (f.eps_mode == "fixed")
    tc.eps_mode = EpsMode::fixed;
  else
    tc.eps_mode = EpsMode::grad_relative;

  const TuneResult res =
      tuned ? tune(bp, h.flat(), y0, tc) : train_fixed(bp, h.flat(), y0, tc);

  unflatten(res.y, &params);
  CheckpointData ckpt;
  ckpt.stages = setup.net.stages;
  ckpt.channels = setup.net.channels;
  ckpt.hidden = setup.net.hidden;
  ckpt.ss_steps = setup.net.ss_steps;
  ckpt.precision = g.precision;
  ckpt.hyper = HyperParams::from_flat(res.x, g.stages);
  ckpt.iteration = f.budget;
  ckpt.seed = g.seed;
  ckpt.tensors = params_to_named(params, setup.net);
  save_checkpoint(f.out, ckpt);

  fs::path hist = f.out;
  hist.replace_extension();
  hist += ".history.csv";
  write_history_csv(hist, res.history, g.stages);

  double final_train = 0.0, final_val = 0.0;
  if (!res.history.empty()) {
    final_train = res.history.back().train_loss;
    final_val = res.history.back().val_loss;
  } else {
    final_train = bp.lower(res.x, res.y, 1, nullptr);
    final_val = bp.upper(res.x, res.y, nullptr);
  }
  std::printf("final_train_loss=%.17g\nfinal_val_loss=%.17g\n", final_train, final_val);
  if (tuned) {
    for (int k = 0; k < g.stages; ++k)
      std::printf("lambda_sta_%d=%.17g\n", k, res.x[std::size_t(k)]);
    std::printf("lambda_mat=%.17g\nlambda_reg=%.17g\nlambda_jac=%.17g\n",
                res.x[std::size_t(g.stages)], res.x[std::size_t(g.stages) + 1],
                res.x[std::size_t(g.stages) + 2]);
  }
  return 0;
}

// ---- register ----

struct RegisterFlags {
  std::string ckpt, source, target, out;
};

template <class T>
int run_register(const Globals& g, const RegisterFlags& f, const CheckpointData& ckpt) {
  NetConfig net;
  net.stages = ckpt.stages;
  net.channels = ckpt.channels;
  net.hidden = ckpt.hidden;
  net.ss_steps = ckpt.ss_steps;
  net.validate();
  const ParamSet<T> params = params_from_named<T>(ckpt.tensors, net);

  const Volume src = load_volume(f.source);
  const Volume tgt = load_volume(f.target);

  CascadeOptions opt = CascadeOptions::inference();
  opt.full_res_output = !g.half_res;
  const RegistrationResult r = register_forward(src, tgt, params, net, opt);

  fs::create_directories(f.out);
  const fs::path out(f.out);
  save_volume(out / "warped.json", r.warped);
  save_field(out / "field.json", r.final_phi);
  for (std::size_t j = 0; j < r.phi.size(); ++j)
    save_field(out / ("stage_" + std::to_string(j) + "_field.json"), r.phi[j]);

  Volume ref = tgt;
  if (g.half_res) ref = image_levels(tgt, 1)[0];
  write_checkerboard_pgm(out / "overlay.pgm", r.warped, ref);

  const double ncc = local_ncc(r.warped, ref, clamp_window(9, ref.meta));
  std::printf("ncc=%.6f\n", ncc);
  return 0;
}

// ---- eval ----

struct EvalFlags {
  std::string field, source_labels, target_labels, pred_warped, target;
};

int run_eval(const EvalFlags& f) {
  const VectorField disp = load_field(f.field);
  const LabelMap a = load_labels(f.source_labels);
  const LabelMap b = load_labels(f.target_labels);

  const LabelMap warped = warp_labels_nn(a, disp);
  const DiceResult d = dice(warped, b);
  const FoldReport folds = jacobian_analysis(disp);

  MetricReport r;
  r.dice_per_class = d.per_class;
  r.dice_mean = d.mean;
  r.fold_count = folds.fold_count;
  r.min_det = folds.min_det;
  r.fold_dims = disp.meta.dims;
  if (!f.pred_warped.empty()) {
    const Volume w = load_volume(f.pred_warped);
    const Volume t = load_volume(f.target);
    r.ncc = local_ncc(w, t, clamp_window(9, w.meta));
  }
  std::fputs(to_kv(r).c_str(), stdout);
  return 0;
}

// ---- gradcheck ----

struct GradcheckFlags {
  int size = 8;
  int stages = 1;
  bool corrupt = false;
};

template <class T>
struct LossBuild {
  const SynthPair* sp;
  const NetConfig* net;
  const std::vector<std::string>* names;  // leaf order: parameters, then loss weights
  std::uint64_t noise_seed;

  typename Tape<T>::Id operator()(Tape<T>& tape,
                                  const std::vector<typename Tape<T>::Id>& ids) const {
    BoundParams<T> bp;
    for (std::size_t i = 0; i < names->size(); ++i) bp.ids.emplace_back((*names)[i], ids[i]);
    const std::vector<typename Tape<T>::Id> lam(ids.begin() + long(names->size()), ids.end());
    CascadeOptions opt;
    opt.sample_features = true;
    opt.full_res_output = false;
    opt.noise_seed = noise_seed;
    return build_cascade_graph(tape, sp->source, sp->target, bp, *net, opt, &lam).total;
  }
};

template <class T>
std::vector<Tensor<T>> gc_leaves(const ParamSet<T>& ps, int stages) {
  std::vector<Tensor<T>> leaves;
  for (const auto& [name, tv] : ps.entries) leaves.push_back(tv);
  for (int j = 0; j < stages; ++j) leaves.push_back(Tensor<T>::scalar(0.7 + 0.2 * j));
  leaves.push_back(Tensor<T>::scalar(1.1));
  leaves.push_back(Tensor<T>::scalar(0.8));
  leaves.push_back(Tensor<T>::scalar(1.7));
  return leaves;
}

template <class To, class From>
std::vector<Tensor<To>> cast_tensors(const std::vector<Tensor<From>>& in) {
  std::vector<Tensor<To>> out;
  out.reserve(in.size());
  for (const auto& t : in) {
    Tensor<To> o(t.channels, t.dims);
    for (std::size_t j = 0; j < t.v.size(); ++j) o.v[j] = To(t.v[j]);
    out.push_back(std::move(o));
  }
  return out;
}

int run_gradcheck(const Globals& g, const GradcheckFlags& f) {
  NetConfig net;
  net.stages = f.stages;
  net.channels.assign(std::size_t(f.stages), 2);
  net.hidden = 4;
  net.validate();
  if (f.size % (1 << f.stages) != 0)
    throw shape_error("gradcheck: size must be divisible by 2^stages");

  SynthConfig sc;
  sc.dims = {f.size, f.size, f.size};
  sc.deform_magnitude = double(f.size) / 16.0;
  SynthPair sp = synth_pair(sc, seed_mix(g.seed, 11));
  // independent voxel noise decorrelates every matching window, keeping the
  // correlation terms away from their clipped maximum
  {
    Rng nz(seed_mix(g.seed, 55));
    for (auto& v : sp.source.values) v += nz.uniform(-0.08, 0.08);
    for (auto& v : sp.target.values) v += nz.uniform(-0.08, 0.08);
  }

  // a generic operating point: random heads plus an offset that moves the
  // preactivation clusters off the activation kink
  ParamSet<double> ps = init_params<double>(net, seed_mix(g.seed, 22), true);
  Rng jitter(seed_mix(g.seed, 33));
  for (auto& [name, tv] : ps.entries) {
    const double amp = name.ends_with("_b") ? 0.1 : 0.05;
    for (auto& v : tv.v) v += jitter.uniform(-amp, amp);
  }
  std::vector<std::string> names;
  for (const auto& [name, tv] : ps.entries) names.push_back(name);

  const std::uint64_t noise_seed = seed_mix(g.seed, 44);
  const LossBuild<double> build_d{&sp, &net, &names, noise_seed};

  GradCheckOptions gopt;
  gopt.step = 3e-5;
  gopt.corrupt_scale = f.corrupt ? 1.1 : 1.0;

  GradCheckReport rep;
  double threshold = 1e-4;
  if (g.precision == "single") {
    // the reduced-width adjoint cannot be resolved by differencing its own
    // objective, so check it against differences of the double graph at the
    // float-rounded operating point
    ParamSet<float> psf;
    for (const auto& [name, tv] : ps.entries) {
      Tensor<float> o(tv.channels, tv.dims);
      for (std::size_t j = 0; j < tv.v.size(); ++j) o.v[j] = float(tv.v[j]);
      psf.add(name, std::move(o));
    }
    const std::vector<Tensor<float>> leaves_f = gc_leaves(psf, f.stages);
    const std::vector<Tensor<double>> leaves_d = cast_tensors<double>(leaves_f);
    const LossBuild<float> build_f{&sp, &net, &names, noise_seed};
    gopt.floor_tau = 1e-3;
    threshold = 1e-2;
    rep = grad_check_against(leaves_d, build_d, tape_gradients(leaves_f, build_f), gopt);
  } else {
    gopt.floor_tau = 1e-6;
    rep = grad_check(gc_leaves(ps, f.stages), build_d, gopt);
  }

  std::printf("max_rel_err=%.6g\ncoords_checked=%zu\nthreshold=%g\n", rep.max_rel_err,
              rep.coords_checked, threshold);
  return rep.max_rel_err <= threshold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage diffeomorphic volume registration"};
  app.require_subcommand(1);

  Globals g;
  app.add_option("--seed", g.seed, "master random seed")->capture_default_str();
  app.add_option("--precision", g.precision, "floating point width")
      ->check(CLI::IsMember({"single", "double"}))
      ->capture_default_str();
  app.add_option("--stages", g.stages, "cascade stage count")
      ->check(CLI::Range(1, 4))
      ->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads inside training batches")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_flag("--half-res-output", g.half_res, "keep outputs at the finest stage grid");

  int rc = 0;

  SynthFlags sf;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic pair dataset");
  synth->fallthrough();
  synth->add_option("--out", sf.out, "dataset directory")->required();
  synth->add_option("--pairs", sf.pairs, "number of pairs")->capture_default_str();
  synth->add_option("--size", sf.size, "cube edge length")->capture_default_str();
  synth->add_option("--class-count", sf.class_count)->capture_default_str();
  synth->add_option("--deform-magnitude", sf.magnitude)->capture_default_str();
  synth->add_option("--deform-smoothness", sf.smoothness)->capture_default_str();
  synth->add_option("--intensity-jitter", sf.jitter)->capture_default_str();
  synth->callback([&] { rc = run_synth(g, sf); });

  TrainFlags tf;
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->fallthrough();
    cmd->add_option("--data", tf.data, "dataset directory or manifest")->required();
    cmd->add_option("--out", tf.out, "checkpoint header path")->required();
    cmd->add_option("--budget", tf.budget, "lower step count")->capture_default_str();
    cmd->add_option("--batch", tf.batch)->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--lower-lr", tf.lower_lr)->capture_default_str();
    cmd->add_option("--log-every", tf.log_every)->capture_default_str();
    cmd->add_option("--lambda-sta", tf.lambda_sta, "stage weights, one per stage")
        ->delimiter(',');
    cmd->add_option("--lambda-mat", tf.lambda_mat)->capture_default_str();
    cmd->add_option("--lambda-reg", tf.lambda_reg)->capture_default_str();
    cmd->add_option("--lambda-jac", tf.lambda_jac)->capture_default_str();
    cmd->add_option("--split", tf.split, "train,val,test fractions")
        ->delimiter(',')
        ->expected(3);
  };

  CLI::App* train = app.add_subcommand("train", "fit parameters at fixed loss weights");
  add_train_flags(train);
  train->callback([&] {
    rc = g.precision == "single" ? run_train<float>(g, tf, false) : run_train<double>(g, tf, false);
  });

  CLI::App* tune = app.add_subcommand("tune", "fit parameters and loss weights jointly");
  add_train_flags(tune);
  tune->add_option("--upper-lr", tf.upper_lr)->capture_default_str();
  tune->add_option("--upper-every", tf.upper_every)->capture_default_str();
  tune->add_option("--eps-mode", tf.eps_mode)
      ->check(CLI::IsMember({"lr", "fixed", "relative"}))
      ->capture_default_str();
  tune->add_option("--eps", tf.eps)->capture_default_str();
  tune->callback([&] {
    rc = g.precision == "single" ? run_train<float>(g, tf, true) : run_train<double>(g, tf, true);
  });

  RegisterFlags rf;
  CLI::App* reg = app.add_subcommand("register", "warp a source volume onto a target");
  reg->fallthrough();
  reg->add_option("--ckpt", rf.ckpt, "checkpoint header path")->required();
  reg->add_option("--source", rf.source)->required();
  reg->add_option("--target", rf.target)->required();
  reg->add_option("--out", rf.out, "output directory")->required();
  reg->callback([&] {
    const CheckpointData ckpt = load_checkpoint(rf.ckpt);
    rc = ckpt.precision == "single" ? run_register<float>(g, rf, ckpt)
                                    : run_register<double>(g, rf, ckpt);
  });

  EvalFlags ef;
  CLI::App* eval = app.add_subcommand("eval", "score a deformation against labels");
  eval->fallthrough();
  eval->add_option("--field", ef.field)->required();
  eval->add_option("--source-labels", ef.source_labels)->required();
  eval->add_option("--target-labels", ef.target_labels)->required();
  CLI::Option* warped_opt = eval->add_option("--pred-warped", ef.pred_warped);
  CLI::Option* target_opt = eval->add_option("--target", ef.target);
  warped_opt->needs(target_opt);
  eval->callback([&] { rc = run_eval(ef); });

  GradcheckFlags gf;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "compare gradients to finite differences");
  gradcheck->fallthrough();
  gradcheck->add_option("--size", gf.size, "cube edge length")->capture_default_str();
  gradcheck->add_option("--stages", gf.stages, "stage count of the tiny instance")
      ->check(CLI::Range(1, 4))
      ->capture_default_str();
  gradcheck->add_flag("--corrupt-gradient", gf.corrupt)->group("");  // test hook
  gradcheck->callback([&] { rc = run_gradcheck(g, gf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const data_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const numeric_error& e) {
    if (e.iteration >= 0)
      std::fprintf(stderr, "error: %s (iteration %ld)\n", e.what(), e.iteration);
    else
      std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const shape_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  }
  return rc;
}
