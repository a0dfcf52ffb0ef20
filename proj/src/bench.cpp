#include "kfl/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "kfl/filter.hpp"
#include "kfl/rng.hpp"

namespace kfl::bench {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Seed channels for dataset generation.
constexpr std::uint64_t kFeatureChannel = 0;
constexpr std::uint64_t kNoiseChannel = 1;
constexpr std::uint64_t kDriftChannel = 2;
constexpr std::uint64_t kEvalChannel = 3;
constexpr std::uint64_t kTargetChannel = 10;
constexpr std::uint64_t kPermutationChannel = 20;

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

Index task_length(const Dataset& data) { return static_cast<Index>(data.x.size()); }

/// Common interface over the filtering and first-order learners.
class OnlineLearner {
 public:
  virtual ~OnlineLearner() = default;
  virtual StepRecord step(const Vector& x, double y, const Vector& theta_star) = 0;
  virtual const Vector& theta() const = 0;
};

class FilteringOnline : public OnlineLearner {
 public:
  FilteringOnline(const FilterLearner& spec, Index d, bool logistic, double noise, bool audit,
                  Index audit_max_dim)
      : model_(make_model(spec, d, logistic, noise)) {
    belief_.mean = Vector::Zero(d);
    belief_.cov = initial_cov(spec, d);
    belief_.step = 0;
    opts_.cov.audit = audit && d <= audit_max_dim;
    opts_.snapshot = false;
    audit_ = audit && d <= audit_max_dim;
  }

  StepRecord step(const Vector& x, double y, const Vector& theta_star) override {
    filter::StepOptions o = opts_;
    if (audit_) o.lyapunov_reference = theta_star;
    Vector obs(1);
    obs(0) = y;
    filter::StepResult r = filter::filter_step(belief_, model_, x, obs, o);
    belief_ = std::move(r.belief);
    return r.record;
  }

  const Vector& theta() const override { return belief_.mean; }

 private:
  static model::StateSpaceModel make_model(const FilterLearner& spec, Index d, bool logistic,
                                           double noise) {
    if (spec.q < 0) throw Error("filter learner: q must be >= 0");
    if (!(spec.sigma0_sq > 0)) throw Error("filter learner: sigma0_sq must be > 0");
    const double r = spec.r.value_or(logistic ? 0.25 : std::max(noise * noise, 1e-8));
    if (!(r > 0)) throw DefinitenessError("filter learner: observation noise must be > 0", r);
    model::StateSpaceModel::Spec s;
    s.state_dim = d;
    s.obs_dim = 1;
    s.input_dim = d;
    s.identity_transition = true;
    s.transition = [](const Vector& th, const Vector&) { return th; };
    s.transition_jacobian = [d](const Vector&, const Vector&) { return Matrix(Matrix::Identity(d, d)); };
    if (logistic) {
      s.observation = [](const Vector& th, const Vector& x) {
        Vector o(1);
        o(0) = sigmoid(x.dot(th));
        return o;
      };
      s.observation_jacobian = [](const Vector& th, const Vector& x) {
        const double p = sigmoid(x.dot(th));
        return Matrix((p * (1.0 - p)) * x.transpose());
      };
    } else {
      s.observation = [](const Vector& th, const Vector& x) {
        Vector o(1);
        o(0) = x.dot(th);
        return o;
      };
      s.observation_jacobian = [](const Vector&, const Vector& x) { return Matrix(x.transpose()); };
    }
    s.Q = cov::ScaledIdentity{d, spec.q};
    s.R = Matrix::Constant(1, 1, r);
    s.name = logistic ? "logistic-regression" : "linear-regression";
    return model::StateSpaceModel(std::move(s));
  }

  static cov::CovarianceRepr initial_cov(const FilterLearner& spec, Index d) {
    const double v = spec.sigma0_sq;
    if (spec.covariance == "dense") return cov::isotropic(d, v, "dense");
    if (spec.covariance == "lowrank") {
      if (spec.rank < 1) throw Error("filter learner: lowrank covariance needs rank >= 1");
      return cov::isotropic(d, v, "lowrank", std::min(spec.rank, d));
    }
    if (spec.covariance == "block") {
      if (spec.blocks < 1 || spec.blocks > d) throw Error("filter learner: blocks must be in [1, d]");
      std::vector<Matrix> blocks;
      for (Index b = 0; b < spec.blocks; ++b) {
        const Index lo = b * d / spec.blocks;
        const Index hi = (b + 1) * d / spec.blocks;
        blocks.push_back(v * Matrix::Identity(hi - lo, hi - lo));
      }
      return cov::make_block_diagonal(std::move(blocks));
    }
    if (spec.covariance == "kronecker") {
      const Index a = spec.kron_rows;
      if (a < 1 || d % a != 0) throw Error("filter learner: kron_rows must divide d");
      return cov::make_kronecker(v * Matrix::Identity(a, a), Matrix::Identity(d / a, d / a));
    }
    throw Error("filter learner: unknown covariance kind '" + spec.covariance + "'");
  }

  model::StateSpaceModel model_;
  filter::GaussianBelief belief_;
  filter::StepOptions opts_;
  bool audit_ = false;
};

class BaselineOnline : public OnlineLearner {
 public:
  BaselineOnline(const BaselineLearner& spec, Index d, bool logistic)
      : spec_(spec), logistic_(logistic) {
    if (spec.lr < 0) throw Error("baseline: lr must be >= 0");
    theta_ = Vector::Zero(d);
    m_ = Vector::Zero(d);
    v_ = Vector::Zero(d);
  }

  StepRecord step(const Vector& x, double y, const Vector&) override {
    const double t0 = now_seconds();
    const double pred = logistic_ ? sigmoid(x.dot(theta_)) : x.dot(theta_);
    const Vector g = (pred - y) * x;
    apply_gradient(g);
    StepRecord rec;
    rec.step = ++t_;
    rec.innovation_norm = std::abs(y - pred);
    rec.gain_norm = g.norm();
    rec.wall_time = now_seconds() - t0;
    return rec;
  }

  /// One optimizer update with an externally supplied gradient.
  void apply_gradient(const Vector& g) {
    switch (spec_.optimizer) {
      case Optimizer::sgd:
        theta_ -= spec_.lr * g;
        break;
      case Optimizer::momentum:
        m_ = spec_.momentum * m_ + g;
        theta_ -= spec_.lr * m_;
        break;
      case Optimizer::adam: {
        ++adam_t_;
        m_ = spec_.beta1 * m_ + (1.0 - spec_.beta1) * g;
        v_ = spec_.beta2 * v_ + (1.0 - spec_.beta2) * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(adam_t_));
        const double c2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(adam_t_));
        const Vector mhat = m_ / c1;
        const Vector vhat = v_ / c2;
        theta_ -= spec_.lr * (mhat.array() / (vhat.array().sqrt() + spec_.eps)).matrix();
        break;
      }
    }
  }

  const Vector& theta() const override { return theta_; }

 private:
  BaselineLearner spec_;
  bool logistic_;
  Vector theta_, m_, v_;
  long t_ = 0;
  long adam_t_ = 0;
};

std::unique_ptr<OnlineLearner> make_learner(const LearnerSpec& spec, const Dataset& data,
                                            const TrainOptions& opts) {
  return std::visit(
      overloaded{[&](const FilterLearner& f) -> std::unique_ptr<OnlineLearner> {
                   return std::make_unique<FilteringOnline>(f, data.dim(), data.logistic, data.noise,
                                                            opts.audit, opts.audit_max_dim);
                 },
                 [&](const BaselineLearner& b) -> std::unique_ptr<OnlineLearner> {
                   return std::make_unique<BaselineOnline>(b, data.dim(), data.logistic);
                 }},
      spec);
}

RunRecord new_record(const TaskSpec& task, const LearnerSpec& learner, const TrainOptions& opts) {
  RunRecord rec;
  rec.config_hash = opts.config_hash;
  rec.seed = opts.seed;
  rec.run_id = make_run_id(opts.config_hash, opts.seed);
  rec.task = task_name(task);
  rec.learner = learner_name(learner);
  return rec;
}

bool blew_up(double loss, double initial) {
  return !std::isfinite(loss) || loss > 1e6 * std::max(initial, 1e-12);
}

void finish(RunRecord& rec, const Vector& theta, const Vector& theta_star) {
  rec.final_theta = theta;
  rec.final_metrics["steps"] = static_cast<double>(rec.steps.size());
  rec.final_metrics["final_loss"] = rec.steps.empty() ? kNaN : rec.steps.back().loss;
  rec.final_metrics["param_error"] = (theta - theta_star).norm();
  double wall = 0.0;
  for (const auto& s : rec.steps) wall += s.wall_time;
  rec.final_metrics["mean_step_seconds"] =
      rec.steps.empty() ? 0.0 : wall / static_cast<double>(rec.steps.size());
  rec.final_metrics["diverged"] = rec.diverged ? 1.0 : 0.0;
}

RunRecord run_supervised(const TaskSpec& task, const LearnerSpec& learner,
                         const TrainOptions& opts) {
  const Dataset data = generate(task, opts.seed);
  RunRecord rec = new_record(task, learner, opts);
  auto l = make_learner(learner, data, opts);
  const Index T = opts.steps > 0 ? std::min(opts.steps, task_length(data)) : task_length(data);
  const double initial = population_loss(data, 0, l->theta());
  for (Index t = 0; t < T; ++t) {
    StepRecord s = l->step(data.x[t], data.y[t], data.theta_star[t]);
    s.step = t + 1;
    s.loss = population_loss(data, t, l->theta());
    rec.append(std::move(s));
    if (blew_up(rec.steps.back().loss, initial)) {
      rec.diverged = true;
      break;
    }
  }
  finish(rec, l->theta(), data.theta_star[std::max<Index>(0, T - 1)]);
  return rec;
}

RunRecord run_quadratic(const Quadratic& q, const BaselineLearner& learner,
                        const TrainOptions& opts) {
  const Index d = static_cast<Index>(q.eigenvalues.size());
  if (d == 0) throw Error("quadratic task needs at least one eigenvalue");
  Vector lam(d);
  for (Index i = 0; i < d; ++i) {
    lam(i) = q.eigenvalues[i];
    if (!(lam(i) > 0)) throw Error("quadratic task eigenvalues must be positive");
  }
  const Vector theta_star = Vector::Ones(d);
  auto loss = [&](const Vector& th) {
    const Vector e = th - theta_star;
    return 0.5 * e.dot(lam.cwiseProduct(e));
  };
  RunRecord rec = new_record(TaskSpec{q}, LearnerSpec{learner}, opts);
  BaselineOnline opt(learner, d, false);
  const double initial = loss(opt.theta());
  const Index T = opts.steps > 0 ? opts.steps : q.T;
  for (Index t = 0; t < T; ++t) {
    const double t0 = now_seconds();
    const Vector g = lam.cwiseProduct(opt.theta() - theta_star);
    opt.apply_gradient(g);
    StepRecord s;
    s.step = t + 1;
    s.loss = loss(opt.theta());
    s.gain_norm = g.norm();
    s.wall_time = now_seconds() - t0;
    rec.append(s);
    if (blew_up(s.loss, initial)) {
      rec.diverged = true;
      break;
    }
  }
  finish(rec, opt.theta(), theta_star);
  return rec;
}

RunRecord run_teacher_stream(const TeacherStream& ts, const FilterLearner& learner,
                             const TrainOptions& opts) {
  const observer::ToyDecoder dec = observer::make_random_decoder(
      ts.hidden_dim, ts.vocab, ts.decoder_seed, ts.recurrent_scale, ts.embedding_scale,
      ts.emission_scale, ts.q);
  const Index T = opts.steps > 0 ? opts.steps : ts.T;
  const observer::StreamSet streams =
      observer::generate_streams(dec, T, opts.seed, ts.dropout, ts.vocab_perturb);
  RunRecord rec = new_record(TaskSpec{ts}, LearnerSpec{learner}, opts);
  observer::ObserverState state = observer::make_observer_state(streams.h0, learner.sigma0_sq);
  for (Index t = 0; t < T; ++t) {
    const double t0 = now_seconds();
    observer::DecodeResult dr = observer::decode_step(state, dec, streams.inputs[t]);
    const Index target = streams.tokens[t + 1];
    const observer::CorrectionResult cr = observer::innovation_correct(dr.predicted, dec, target);
    StepRecord s;
    s.step = t + 1;
    s.loss = -std::log(std::max(dr.probabilities(target), 1e-300));
    s.innovation_norm = cr.innovation.norm();
    s.gain_norm = cr.K.norm();
    s.spectral_radius = observer::observer_stability(dr.F_jacobian, cr.K, cr.H);
    s.wall_time = now_seconds() - t0;
    rec.append(s);
    state = cr.state;
  }
  observer::ShiftConfig cfg;
  cfg.T = T;
  cfg.sigma0_sq = learner.sigma0_sq;
  cfg.dropout = ts.dropout;
  cfg.vocab_perturb = ts.vocab_perturb;
  rec.final_metrics["nll_corrected"] = observer::stream_nll(dec, streams, true, true, cfg);
  rec.final_metrics["nll_plain"] = observer::stream_nll(dec, streams, true, false, cfg);
  rec.final_metrics["nll_clean"] = observer::stream_nll(dec, streams, false, false, cfg);
  rec.final_metrics["steps"] = static_cast<double>(rec.steps.size());
  rec.final_metrics["final_loss"] = rec.final_metrics["nll_corrected"];
  rec.final_theta = state.belief.mean;
  return rec;
}

}  // namespace

std::string task_name(const TaskSpec& task) {
  return std::visit(overloaded{[](const LinearRegression&) { return std::string("linear_regression"); },
                               [](const LogisticRegression&) { return std::string("logistic_regression"); },
                               [](const DriftingRegression&) { return std::string("drifting_regression"); },
                               [](const PermutedFeatures&) { return std::string("permuted_features"); },
                               [](const TeacherStream&) { return std::string("teacher_stream"); },
                               [](const Quadratic&) { return std::string("quadratic"); }},
                    task);
}

std::string optimizer_name(Optimizer opt) {
  switch (opt) {
    case Optimizer::sgd:
      return "sgd";
    case Optimizer::momentum:
      return "momentum";
    case Optimizer::adam:
      return "adam";
  }
  return "sgd";
}

Optimizer parse_optimizer(const std::string& name) {
  if (name == "sgd") return Optimizer::sgd;
  if (name == "momentum") return Optimizer::momentum;
  if (name == "adam") return Optimizer::adam;
  throw Error("unknown optimizer '" + name + "' (expected sgd, momentum or adam)");
}

std::string learner_name(const LearnerSpec& learner) {
  return std::visit(
      overloaded{[](const FilterLearner& f) { return "filter-" + f.covariance; },
                 [](const BaselineLearner& b) { return optimizer_name(b.optimizer); }},
      learner);
}

Dataset generate(const TaskSpec& task, std::uint64_t seed) {
  Dataset data;
  auto target = [&](Index d, double scale) {
    NoiseStream ns(seed, 0, kTargetChannel);
    return Vector(ns.normal(d) * scale);
  };
  auto check_size = [](Index d, Index T) {
    if (d < 1) throw Error("task dimension must be >= 1");
    if (T < 1) throw Error("task length must be >= 1");
    if (d * T > 50'000'000) throw Error("task too large for a desk-scale run");
  };
  std::visit(
      overloaded{
          [&](const LinearRegression& t) {
            check_size(t.d, t.T);
            if (t.noise < 0) throw Error("noise must be >= 0");
            const Vector th = target(t.d, 1.0);
            data.feature_var = Vector::Ones(t.d);
            data.noise = t.noise;
            for (Index i = 0; i < t.T; ++i) {
              NoiseStream fx(seed, i, kFeatureChannel), fn(seed, i, kNoiseChannel);
              const Vector x = fx.normal(t.d);
              data.x.push_back(x);
              data.y.push_back(x.dot(th) + t.noise * fn.normal());
              data.theta_star.push_back(th);
              data.task_of.push_back(0);
            }
          },
          [&](const LogisticRegression& t) {
            check_size(t.d, t.T);
            const Vector th = target(t.d, 2.0 / std::sqrt(static_cast<double>(t.d)));
            data.logistic = true;
            data.feature_var = Vector::Ones(t.d);
            for (Index i = 0; i < t.T; ++i) {
              NoiseStream fx(seed, i, kFeatureChannel), fn(seed, i, kNoiseChannel);
              const Vector x = fx.normal(t.d);
              data.x.push_back(x);
              data.y.push_back(fn.uniform() < sigmoid(x.dot(th)) ? 1.0 : 0.0);
              data.theta_star.push_back(th);
              data.task_of.push_back(0);
            }
            for (Index i = 0; i < 1000; ++i) {
              NoiseStream fe(seed, i, kEvalChannel);
              const Vector x = fe.normal(t.d);
              data.eval_x.push_back(x);
              data.eval_y.push_back(sigmoid(x.dot(th)));
            }
          },
          [&](const DriftingRegression& t) {
            check_size(t.d, t.T);
            if (t.noise < 0 || t.drift_rate < 0) throw Error("noise and drift_rate must be >= 0");
            Vector th = target(t.d, 1.0);
            data.feature_var = Vector::Ones(t.d);
            data.noise = t.noise;
            for (Index i = 0; i < t.T; ++i) {
              NoiseStream fx(seed, i, kFeatureChannel), fn(seed, i, kNoiseChannel),
                  fd(seed, i, kDriftChannel);
              const Vector x = fx.normal(t.d);
              data.x.push_back(x);
              data.y.push_back(x.dot(th) + t.noise * fn.normal());
              data.theta_star.push_back(th);
              data.task_of.push_back(0);
              th += t.drift_rate * fd.normal(t.d);
            }
          },
          [&](const PermutedFeatures& t) {
            check_size(t.d, t.tasks * t.T_per_task);
            if (t.tasks < 1) throw Error("permuted features needs at least one task");
            if (t.noise < 0) throw Error("noise must be >= 0");
            const Vector th = target(t.d, 1.0);
            data.noise = t.noise;
            data.feature_var.resize(t.d);
            for (Index i = 0; i < t.d; ++i) {
              const double frac = t.d == 1 ? 0.0 : static_cast<double>(i) / (t.d - 1);
              data.feature_var(i) = std::pow(10.0, -1.0 + 2.0 * frac);
            }
            for (Index k = 0; k < t.tasks; ++k) {
              std::vector<Index> perm(t.d);
              std::iota(perm.begin(), perm.end(), 0);
              if (k > 0) {
                NoiseStream ps(seed, k, kPermutationChannel);
                std::shuffle(perm.begin(), perm.end(), ps.engine());
              }
              data.permutations.push_back(perm);
            }
            const Vector sd = data.feature_var.cwiseSqrt();
            for (Index k = 0; k < t.tasks; ++k) {
              const auto& perm = data.permutations[k];
              Vector opt(t.d);
              for (Index j = 0; j < t.d; ++j) opt(j) = th(perm[j]);
              for (Index i = 0; i < t.T_per_task; ++i) {
                const Index gi = k * t.T_per_task + i;
                NoiseStream fx(seed, gi, kFeatureChannel), fn(seed, gi, kNoiseChannel);
                const Vector base = fx.normal(t.d).cwiseProduct(sd);
                Vector x(t.d);
                for (Index j = 0; j < t.d; ++j) x(j) = base(perm[j]);
                data.x.push_back(x);
                data.y.push_back(th.dot(base) + t.noise * fn.normal());
                data.theta_star.push_back(opt);
                data.task_of.push_back(k);
              }
            }
          },
          [&](const TeacherStream&) {
            throw Error("teacher_stream tasks generate token streams, not regression data");
          },
          [&](const Quadratic&) { throw Error("quadratic tasks have no data stream"); }},
      task);
  return data;
}

double task_loss(const Dataset& data, Index task, const Vector& theta) {
  if (task < 0 || task >= static_cast<Index>(data.permutations.size())) {
    throw DimensionError("task index out of range");
  }
  const auto& perm = data.permutations[task];
  // theta_star holds the per-task optimum at every datum of that task.
  const Index per_task = static_cast<Index>(data.x.size() / data.permutations.size());
  const Vector& opt = data.theta_star[task * per_task];
  double s = 0.0;
  for (Index j = 0; j < theta.size(); ++j) {
    const double e = theta(j) - opt(j);
    s += data.feature_var(perm[j]) * e * e;
  }
  return 0.5 * s + 0.5 * data.noise * data.noise;
}

double population_loss(const Dataset& data, Index t, const Vector& theta) {
  if (data.logistic) {
    double s = 0.0;
    for (size_t i = 0; i < data.eval_x.size(); ++i) {
      const double z = data.eval_x[i].dot(theta);
      const double p = data.eval_y[i];
      // -[p log sigmoid(z) + (1 - p) log sigmoid(-z)]
      const double lse_pos = z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
      const double lse_neg = lse_pos + z;
      s += p * lse_pos + (1.0 - p) * lse_neg;
    }
    return s / static_cast<double>(data.eval_x.size());
  }
  if (!data.permutations.empty()) return task_loss(data, data.task_of[t], theta);
  const Vector e = theta - data.theta_star[t];
  return 0.5 * e.dot(data.feature_var.cwiseProduct(e)) + 0.5 * data.noise * data.noise;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string make_run_id(const std::string& config_hash, std::uint64_t seed) {
  return config_hash + "-s" + std::to_string(seed);
}

RunRecord train_filtering(const TaskSpec& task, const FilterLearner& learner,
                          const TrainOptions& opts) {
  if (const auto* ts = std::get_if<TeacherStream>(&task)) return run_teacher_stream(*ts, learner, opts);
  if (std::holds_alternative<Quadratic>(task)) {
    throw Error("quadratic tasks are for first-order baselines");
  }
  return run_supervised(task, LearnerSpec{learner}, opts);
}

RunRecord train_baseline(const TaskSpec& task, const BaselineLearner& learner,
                         const TrainOptions& opts) {
  if (const auto* q = std::get_if<Quadratic>(&task)) return run_quadratic(*q, learner, opts);
  if (std::holds_alternative<TeacherStream>(task)) {
    throw Error("teacher_stream tasks require the filtering learner");
  }
  return run_supervised(task, LearnerSpec{learner}, opts);
}

RunRecord train(const TaskSpec& task, const LearnerSpec& learner, const TrainOptions& opts) {
  return std::visit(
      overloaded{[&](const FilterLearner& f) { return train_filtering(task, f, opts); },
                 [&](const BaselineLearner& b) { return train_baseline(task, b, opts); }},
      learner);
}

ContinualResult continual_eval(const PermutedFeatures& task, const LearnerSpec& learner,
                               const TrainOptions& opts, std::optional<Index> freeze_after_task) {
  const Dataset data = generate(TaskSpec{task}, opts.seed);
  auto l = make_learner(learner, data, opts);
  ContinualResult res;
  res.record = new_record(TaskSpec{task}, learner, opts);
  const Index n_tasks = task.tasks;
  const Index per = task.T_per_task;
  res.curves.assign(n_tasks, std::vector<double>());
  std::vector<double> start(n_tasks, kNaN);
  for (Index t = 0; t < n_tasks * per; ++t) {
    const Index k = data.task_of[t];
    if (t % per == 0) start[k] = task_loss(data, k, l->theta());
    StepRecord s;
    if (!freeze_after_task || k < *freeze_after_task) {
      s = l->step(data.x[t], data.y[t], data.theta_star[t]);
    }
    s.step = t + 1;
    s.loss = task_loss(data, k, l->theta());
    res.record.append(std::move(s));
    for (Index j = 0; j < n_tasks; ++j) res.curves[j].push_back(task_loss(data, j, l->theta()));
  }

  double forget = 0.0;
  for (Index k = 0; k + 1 < n_tasks; ++k) {
    const auto& c = res.curves[k];
    const double best = *std::min_element(c.begin() + k * per, c.end());
    forget += c.back() - best;
  }
  res.forgetting = n_tasks > 1 ? forget / static_cast<double>(n_tasks - 1) : 0.0;

  double plastic = 0.0;
  for (Index k = 1; k < n_tasks; ++k) {
    const auto& c = res.curves[k];
    const double best = *std::min_element(c.begin() + k * per, c.begin() + (k + 1) * per);
    plastic += std::max(0.0, start[k] - best);
  }
  res.plasticity = n_tasks > 1 ? plastic / static_cast<double>(n_tasks - 1) : 0.0;

  for (Index k = 0; k < n_tasks; ++k) res.final_losses.push_back(res.curves[k].back());
  finish(res.record, l->theta(), data.theta_star.back());
  res.record.final_metrics["forgetting"] = res.forgetting;
  res.record.final_metrics["plasticity"] = res.plasticity;
  for (Index k = 0; k < n_tasks; ++k) {
    res.record.final_metrics["final_loss_task" + std::to_string(k)] = res.final_losses[k];
  }
  return res;
}

// ---- metric files ----

namespace {

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return nullptr;
  return v > 0 ? "inf" : "-inf";
}

double from_json_number(const nlohmann::json& j) {
  if (j.is_null()) return kNaN;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    throw Error("summary: unexpected string for a number: " + s);
  }
  return j.get<double>();
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << content;
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

const char* kStepHeader = "run_id,step,loss,innovation_norm,gain_norm,spectral_radius,lyapunov,wall_time";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  if (s == "nan") return kNaN;
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw Error("malformed number '" + s + "'");
  return v;
}

}  // namespace

void export_metrics(const std::vector<RunRecord>& records, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream csv;
  csv << kStepHeader << "\n";
  for (const auto& r : records) {
    for (const auto& s : r.steps) {
      csv << r.run_id << "," << s.step << "," << fmt_double(s.loss) << ","
          << fmt_double(s.innovation_norm) << "," << fmt_double(s.gain_norm) << ","
          << fmt_double(s.spectral_radius) << "," << fmt_double(s.lyapunov) << ","
          << fmt_double(s.wall_time) << "\n";
    }
  }
  write_atomically(fs::path(dir) / "steps.csv", csv.str());

  for (const auto& r : records) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["run_id"] = r.run_id;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    j["task"] = r.task;
    j["learner"] = r.learner;
    j["diverged"] = r.diverged;
    j["num_steps"] = r.steps.size();
    nlohmann::json fm = nlohmann::json::object();
    for (const auto& [k, v] : r.final_metrics) fm[k] = json_number(v);
    j["final_metrics"] = fm;
    nlohmann::json th = nlohmann::json::array();
    for (Index i = 0; i < r.final_theta.size(); ++i) th.push_back(json_number(r.final_theta(i)));
    j["final_theta"] = th;
    write_atomically(fs::path(dir) / ("summary_" + r.run_id + ".json"), j.dump(2) + "\n");
  }
}

RunRecord import_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open summary " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("summary " + path + " is not valid JSON: " + e.what());
  }
  const int version = j.at("schema_version").get<int>();
  if (version != kSchemaVersion) {
    throw Error("summary " + path + " has schema version " + std::to_string(version) +
                ", expected " + std::to_string(kSchemaVersion));
  }
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.task = j.at("task").get<std::string>();
  r.learner = j.at("learner").get<std::string>();
  r.diverged = j.at("diverged").get<bool>();
  for (const auto& [k, v] : j.at("final_metrics").items()) r.final_metrics[k] = from_json_number(v);
  const auto& th = j.at("final_theta");
  r.final_theta.resize(static_cast<Index>(th.size()));
  for (size_t i = 0; i < th.size(); ++i) r.final_theta(static_cast<Index>(i)) = from_json_number(th[i]);
  return r;
}

std::map<std::string, std::vector<StepRecord>> import_steps(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kStepHeader) {
    throw Error(path + ": missing or unexpected header");
  }
  std::map<std::string, std::vector<StepRecord>> out;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 8) throw Error(path + ":" + std::to_string(lineno) + ": expected 8 fields");
    StepRecord s;
    s.step = std::stol(cells[1]);
    s.loss = parse_double(cells[2]);
    s.innovation_norm = parse_double(cells[3]);
    s.gain_norm = parse_double(cells[4]);
    s.spectral_radius = parse_double(cells[5]);
    s.lyapunov = parse_double(cells[6]);
    s.wall_time = parse_double(cells[7]);
    out[cells[0]].push_back(s);
  }
  return out;
}

void write_trajectory_csv(const model::Trajectory& traj, const std::string& path) {
  if (traj.states.empty()) throw Error("trajectory has no states");
  const Index n = traj.states.front().size();
  const Index m = traj.observations.empty() ? 0 : traj.observations.front().size();
  if (!traj.observations.empty() && traj.observations.size() != traj.states.size()) {
    throw DimensionError("trajectory observations and states differ in length");
  }
  std::ostringstream os;
  for (Index i = 0; i < n; ++i) os << (i ? "," : "") << "x" << (i + 1);
  for (Index i = 0; i < m; ++i) os << ",y" << (i + 1);
  os << "\n";
  for (size_t t = 0; t < traj.states.size(); ++t) {
    for (Index i = 0; i < n; ++i) os << (i ? "," : "") << fmt_double(traj.states[t](i));
    for (Index i = 0; i < m; ++i) os << "," << fmt_double(traj.observations[t](i));
    os << "\n";
  }
  write_atomically(path, os.str());
}

model::Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trajectory file " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": empty file");
  const auto header = split_csv(line);
  Index n = 0, m = 0;
  for (const auto& h : header) {
    if (h.size() >= 2 && h[0] == 'x' && m == 0) {
      ++n;
    } else if (h.size() >= 2 && h[0] == 'y') {
      ++m;
    } else {
      throw Error(path + ": unexpected column '" + h + "' (expected x1..xn then y1..ym)");
    }
  }
  if (n == 0) throw Error(path + ": no state columns");
  model::Trajectory traj;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (static_cast<Index>(cells.size()) != n + m) {
      throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(n + m) +
                  " fields");
    }
    Vector x(n), y(m);
    try {
      for (Index i = 0; i < n; ++i) x(i) = parse_double(cells[i]);
      for (Index i = 0; i < m; ++i) y(i) = parse_double(cells[n + i]);
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    traj.states.push_back(x);
    if (m > 0) traj.observations.push_back(y);
  }
  return traj;
}

void write_file_atomically(const std::string& path, const std::string& content) {
  write_atomically(std::filesystem::path(path), content);
}

}  // namespace kfl::bench
