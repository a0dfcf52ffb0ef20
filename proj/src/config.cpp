#include "kfl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace kfl::config {

namespace {

using nlohmann::json;

/// Reads fields of one JSON object and rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  double number(const std::string& key, double def, double lo = -INFINITY,
                double hi = INFINITY) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    const double x = v.get<double>();
    if (!(x >= lo && x <= hi)) {
      throw ConfigError(where(key) + ": value " + v.dump() + " outside [" + fmt(lo) + ", " +
                        fmt(hi) + "]");
    }
    return x;
  }

  std::uint64_t uinteger(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    return as_uint(raw(key), where(key));
  }

  Index index(const std::string& key, Index def, Index lo = 0) {
    if (!has(key)) return def;
    const std::uint64_t v = as_uint(raw(key), where(key));
    if (static_cast<Index>(v) < lo) {
      throw ConfigError(where(key) + ": must be at least " + std::to_string(lo));
    }
    return static_cast<Index>(v);
  }

  std::string string(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    return v.get<std::string>();
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    return v.get<bool>();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown key");
    }
  }

  std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  static std::uint64_t as_uint(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(where + ": expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

 private:
  static std::string fmt(double x) {
    std::ostringstream os;
    os << x;
    return os.str();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json parse_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": invalid JSON: " + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bench::TaskSpec parse_task(const json& j) {
  ObjectReader r(j, "task");
  const std::string type = r.string("type", "");
  bench::TaskSpec out;
  if (type == "linear_regression") {
    bench::LinearRegression t;
    t.d = r.index("d", t.d, 1);
    t.T = r.index("T", t.T, 1);
    t.noise = r.number("noise", t.noise, 0.0);
    out = t;
  } else if (type == "logistic_regression") {
    bench::LogisticRegression t;
    t.d = r.index("d", t.d, 1);
    t.T = r.index("T", t.T, 1);
    out = t;
  } else if (type == "drifting_regression") {
    bench::DriftingRegression t;
    t.d = r.index("d", t.d, 1);
    t.T = r.index("T", t.T, 1);
    t.drift_rate = r.number("drift_rate", t.drift_rate, 0.0);
    t.noise = r.number("noise", t.noise, 0.0);
    out = t;
  } else if (type == "permuted_features") {
    bench::PermutedFeatures t;
    t.d = r.index("d", t.d, 1);
    t.tasks = r.index("tasks", t.tasks, 1);
    t.T_per_task = r.index("T_per_task", t.T_per_task, 1);
    t.noise = r.number("noise", t.noise, 0.0);
    out = t;
  } else if (type == "teacher_stream") {
    bench::TeacherStream t;
    t.hidden_dim = r.index("hidden_dim", t.hidden_dim, 1);
    t.vocab = r.index("vocab", t.vocab, 2);
    t.T = r.index("T", t.T, 1);
    t.dropout = r.number("dropout", t.dropout, 0.0, 1.0);
    t.vocab_perturb = r.number("vocab_perturb", t.vocab_perturb, 0.0, 1.0);
    t.recurrent_scale = r.number("recurrent_scale", t.recurrent_scale, 0.0);
    t.embedding_scale = r.number("embedding_scale", t.embedding_scale, 0.0);
    t.emission_scale = r.number("emission_scale", t.emission_scale, 0.0);
    t.q = r.number("q", t.q, 0.0);
    t.decoder_seed = r.uinteger("decoder_seed", t.decoder_seed);
    out = t;
  } else if (type == "quadratic") {
    bench::Quadratic t;
    if (r.has("eigenvalues")) {
      const json& ev = r.raw("eigenvalues");
      if (!ev.is_array() || ev.empty()) {
        throw ConfigError("task.eigenvalues: expected a non-empty array of positive numbers");
      }
      t.eigenvalues.clear();
      for (const auto& v : ev) {
        if (!v.is_number() || !(v.get<double>() > 0)) {
          throw ConfigError("task.eigenvalues: expected a non-empty array of positive numbers");
        }
        t.eigenvalues.push_back(v.get<double>());
      }
    }
    t.T = r.index("T", t.T, 1);
    out = t;
  } else {
    throw ConfigError("task.type: unknown task '" + type +
                      "' (linear_regression, logistic_regression, drifting_regression, "
                      "permuted_features, teacher_stream, quadratic)");
  }
  r.finish();
  return out;
}

bench::LearnerSpec parse_learner(const json& j) {
  ObjectReader r(j, "learner");
  const std::string type = r.string("type", "filter");
  bench::LearnerSpec out;
  if (type == "filter") {
    bench::FilterLearner f;
    f.covariance = r.string("covariance", f.covariance);
    if (f.covariance != "dense" && f.covariance != "lowrank" && f.covariance != "block" &&
        f.covariance != "kronecker") {
      throw ConfigError("learner.covariance: unknown kind '" + f.covariance +
                        "' (dense, lowrank, block, kronecker)");
    }
    f.rank = r.index("rank", f.rank, 1);
    f.blocks = r.index("blocks", f.blocks, 1);
    f.kron_rows = r.index("kron_rows", f.kron_rows);
    f.q = r.number("q", f.q, 0.0);
    if (r.has("r") && !r.raw("r").is_null()) {
      const double v = r.number("r", 1.0);
      if (!(v > 0)) throw ConfigError("learner.r: observation noise must be positive");
      f.r = v;
    }
    f.sigma0_sq = r.number("sigma0_sq", f.sigma0_sq, 0.0);
    if (!(f.sigma0_sq > 0)) throw ConfigError("learner.sigma0_sq: must be positive");
    out = f;
  } else if (type == "baseline") {
    bench::BaselineLearner b;
    const std::string opt = r.string("optimizer", bench::optimizer_name(b.optimizer));
    try {
      b.optimizer = bench::parse_optimizer(opt);
    } catch (const Error& e) {
      throw ConfigError(std::string("learner.optimizer: ") + e.what());
    }
    b.lr = r.number("lr", b.lr, 0.0);
    b.momentum = r.number("momentum", b.momentum, 0.0, 1.0);
    b.beta1 = r.number("beta1", b.beta1, 0.0, 1.0);
    b.beta2 = r.number("beta2", b.beta2, 0.0, 1.0);
    b.eps = r.number("eps", b.eps, 0.0);
    out = b;
  } else {
    throw ConfigError("learner.type: unknown learner '" + type + "' (filter, baseline)");
  }
  r.finish();
  return out;
}

json task_json(const bench::TaskSpec& task) {
  json j;
  j["type"] = bench::task_name(task);
  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, bench::LinearRegression>) {
          j["d"] = t.d, j["T"] = t.T, j["noise"] = t.noise;
        } else if constexpr (std::is_same_v<T, bench::LogisticRegression>) {
          j["d"] = t.d, j["T"] = t.T;
        } else if constexpr (std::is_same_v<T, bench::DriftingRegression>) {
          j["d"] = t.d, j["T"] = t.T, j["drift_rate"] = t.drift_rate, j["noise"] = t.noise;
        } else if constexpr (std::is_same_v<T, bench::PermutedFeatures>) {
          j["d"] = t.d, j["tasks"] = t.tasks, j["T_per_task"] = t.T_per_task,
          j["noise"] = t.noise;
        } else if constexpr (std::is_same_v<T, bench::TeacherStream>) {
          j["hidden_dim"] = t.hidden_dim, j["vocab"] = t.vocab, j["T"] = t.T,
          j["dropout"] = t.dropout, j["vocab_perturb"] = t.vocab_perturb,
          j["recurrent_scale"] = t.recurrent_scale, j["embedding_scale"] = t.embedding_scale,
          j["emission_scale"] = t.emission_scale, j["q"] = t.q,
          j["decoder_seed"] = t.decoder_seed;
        } else {
          j["eigenvalues"] = t.eigenvalues, j["T"] = t.T;
        }
      },
      task);
  return j;
}

json learner_json(const bench::LearnerSpec& learner) {
  json j;
  if (const auto* f = std::get_if<bench::FilterLearner>(&learner)) {
    j["type"] = "filter";
    j["covariance"] = f->covariance;
    j["rank"] = f->rank;
    j["blocks"] = f->blocks;
    j["kron_rows"] = f->kron_rows;
    j["q"] = f->q;
    j["r"] = f->r ? json(*f->r) : json(nullptr);
    j["sigma0_sq"] = f->sigma0_sq;
  } else {
    const auto& b = std::get<bench::BaselineLearner>(learner);
    j["type"] = "baseline";
    j["optimizer"] = bench::optimizer_name(b.optimizer);
    j["lr"] = b.lr;
    j["momentum"] = b.momentum;
    j["beta1"] = b.beta1;
    j["beta2"] = b.beta2;
    j["eps"] = b.eps;
  }
  return j;
}

Matrix matrix_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a non-empty array of rows");
  const Index rows = static_cast<Index>(j.size());
  Index cols = -1;
  Matrix M;
  for (Index i = 0; i < rows; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || row.empty()) throw ConfigError(what + ": row " + std::to_string(i) + " is not a non-empty array");
    if (cols < 0) {
      cols = static_cast<Index>(row.size());
      M.resize(rows, cols);
    } else if (static_cast<Index>(row.size()) != cols) {
      throw ConfigError(what + ": ragged rows (row " + std::to_string(i) + " has " +
                        std::to_string(row.size()) + " entries, expected " + std::to_string(cols) + ")");
    }
    for (Index k = 0; k < cols; ++k) {
      const json& v = row[static_cast<std::size_t>(k)];
      if (!v.is_number()) throw ConfigError(what + ": non-numeric entry");
      M(i, k) = v.get<double>();
    }
  }
  return M;
}

Vector vector_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + ": expected an array of numbers");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + ": non-numeric entry");
    v(static_cast<Index>(i)) = j[i].get<double>();
  }
  return v;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_text(json_text, "config");
  ObjectReader r(j, "");
  RunConfig cfg;
  if (!r.has("task")) throw ConfigError("task: required key missing");
  cfg.task = parse_task(r.raw("task"));
  cfg.learner = r.has("learner") ? parse_learner(r.raw("learner")) : bench::FilterLearner{};
  if (r.has("seeds")) {
    const json& s = r.raw("seeds");
    if (!s.is_array() || s.empty()) throw ConfigError("seeds: expected a non-empty array of integers");
    cfg.seeds.clear();
    for (const auto& v : s) cfg.seeds.push_back(ObjectReader::as_uint(v, "seeds"));
  }
  cfg.output_dir = r.string("output_dir", "");
  cfg.audit = r.boolean("audit", cfg.audit);
  cfg.audit_max_dim = r.index("audit_max_dim", cfg.audit_max_dim, 1);
  cfg.steps = r.index("steps", cfg.steps);
  r.finish();

  if (const auto* f = std::get_if<bench::FilterLearner>(&cfg.learner)) {
    if (f->covariance == "kronecker" && f->kron_rows > 0) {
      const Index d = std::visit(
          [](const auto& t) -> Index {
            if constexpr (requires { t.d; }) return t.d;
            else return 0;
          },
          cfg.task);
      if (d > 0 && d % f->kron_rows != 0) {
        throw ConfigError("learner.kron_rows: " + std::to_string(f->kron_rows) +
                          " does not divide task dimension " + std::to_string(d));
      }
    }
  }
  if (std::holds_alternative<bench::BaselineLearner>(cfg.learner) &&
      std::holds_alternative<bench::TeacherStream>(cfg.task)) {
    throw ConfigError("learner: teacher_stream runs the observer and needs a filter learner");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_run_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string canonical_json(const RunConfig& cfg, bool include_output_dir) {
  json j;
  j["task"] = task_json(cfg.task);
  j["learner"] = learner_json(cfg.learner);
  j["seeds"] = cfg.seeds;
  if (include_output_dir) j["output_dir"] = cfg.output_dir;
  j["audit"] = cfg.audit;
  j["audit_max_dim"] = cfg.audit_max_dim;
  j["steps"] = cfg.steps;
  return j.dump();
}

std::string config_hash(const RunConfig& cfg) {
  return bench::fnv1a_hex(canonical_json(cfg, false));
}

Matrix parse_matrix(const std::string& json_text) {
  return matrix_from(parse_text(json_text, "matrix"), "matrix");
}

model::StateSpaceModel quadratic_system(double q, double r) {
  model::StateSpaceModel::Spec s;
  s.state_dim = 2;
  s.obs_dim = 1;
  s.name = "quadratic";
  s.transition = [](const Vector& x, const Vector&) {
    Vector o(2);
    o << 0.9 * x(0), 0.5 * x(1) + x(0) * x(0);
    return o;
  };
  s.transition_jacobian = [](const Vector& x, const Vector&) {
    Matrix J(2, 2);
    J << 0.9, 0.0, 2.0 * x(0), 0.5;
    return J;
  };
  s.observation = [](const Vector& x, const Vector&) { return Vector(x.head(1)); };
  s.observation_jacobian = [](const Vector&, const Vector&) {
    Matrix H(1, 2);
    H << 1.0, 0.0;
    return H;
  };
  Matrix Q = Matrix::Zero(2, 2);
  Q(1, 1) = q;
  s.Q = Q;
  s.R = Matrix::Constant(1, 1, r);
  return model::StateSpaceModel(std::move(s));
}

SystemConfig parse_system(const std::string& json_text) {
  const json j = parse_text(json_text, "system");
  ObjectReader r(j, "system");
  if (r.has("builtin")) {
    const std::string name = r.string("builtin", "");
    if (name != "quadratic") throw ConfigError("system.builtin: unknown system '" + name + "' (quadratic)");
    const double q = r.number("q", 0.01, 0.0);
    const double rv = r.number("r", 2.0);
    if (!(rv > 0)) throw ConfigError("system.r: must be positive");
    Vector x0 = Vector::Constant(2, 0.5);
    if (r.has("x0")) x0 = vector_from(r.raw("x0"), "system.x0");
    r.finish();
    if (x0.size() != 2) throw ConfigError("system.x0: expected 2 entries");
    return {quadratic_system(q, rv), x0};
  }
  for (const char* key : {"A", "C", "Q", "R"}) {
    if (!r.has(key)) throw ConfigError(std::string("system.") + key + ": required key missing");
  }
  const Matrix A = matrix_from(r.raw("A"), "system.A");
  const Matrix C = matrix_from(r.raw("C"), "system.C");
  const Matrix Q = matrix_from(r.raw("Q"), "system.Q");
  const Matrix R = matrix_from(r.raw("R"), "system.R");
  Vector x0 = Vector::Zero(A.rows());
  if (r.has("x0")) x0 = vector_from(r.raw("x0"), "system.x0");
  r.finish();
  if (x0.size() != A.rows()) throw ConfigError("system.x0: length does not match A");
  try {
    return {model::make_linear_gaussian(A, C, Q, R), x0};
  } catch (const Error& e) {
    throw ConfigError(std::string("system: ") + e.what());
  }
}

SystemConfig load_system(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_system(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace kfl::config
