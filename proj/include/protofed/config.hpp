#pragma once

#include "protofed/orchestrator.hpp"
#include "protofed/types.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>

namespace protofed {

// Raised for malformed configuration; carries a key path or a line-precise
// parse location. The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace cfg_detail {

// Strict section reader: every present key must be consumed, unknown keys
// are rejected by full path.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Section sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      static const nlohmann::json empty = nlohmann::json::object();
      return Section(empty, path_ + "." + key);
    }
    return Section(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key()))
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string line_of_offset(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  std::ostringstream os;
  os << "line " << line << ", column " << col;
  return os.str();
}

}  // namespace cfg_detail

struct RunConfig {
  RunParams params;
  std::string experiment = "run";
  std::string out_dir = "out";
  std::string world_load_path;   // load instead of generating
  std::string world_save_path;   // persist the generated world
  std::string resume_from;       // checkpoint path
  bool write_checkpoint = false;
  std::vector<double> dp_sweep_sigmas = {0.0, 0.2, 0.4, 0.8};
  int theory_instances = 200;
  std::uint64_t theory_seed = 2024;
  bool theory_inject_violation = false;  // negative self-test control
  int threads = 1;
};

// Parses and validates the full run configuration. Unknown keys anywhere are
// errors; all defaults follow the documented schema.
inline RunConfig parse_config_json(const nlohmann::json& root) {
  using cfg_detail::Section;
  RunConfig rc;
  RunParams& p = rc.params;

  Section top(root, "config");
  rc.experiment = top.get<std::string>("experiment", rc.experiment);
  rc.out_dir = top.get<std::string>("out", rc.out_dir);
  p.seed = top.get<std::uint64_t>("seed", p.seed);
  rc.threads = top.get<int>("threads", rc.threads);
  p.prompt_rows = top.get<int>("prompt_rows", p.prompt_rows);
  rc.resume_from = top.get<std::string>("resume_from", rc.resume_from);
  rc.write_checkpoint = top.get<bool>("write_checkpoint", rc.write_checkpoint);

  {
    Section w = top.sub("world");
    WorldConfig& wc = p.world;
    wc.n_users = w.get<int>("n_users", wc.n_users);
    wc.n_items = w.get<int>("n_items", wc.n_items);
    wc.n_true_clusters = w.get<int>("n_true_clusters", wc.n_true_clusters);
    wc.n_slices = w.get<int>("n_slices", wc.n_slices);
    wc.interactions_per_user_per_slice = w.get<int>(
        "interactions_per_user_per_slice", wc.interactions_per_user_per_slice);
    wc.d = w.get<int>("d", wc.d);
    wc.candidates = w.get<int>("candidates", wc.candidates);
    wc.history_cap = w.get<int>("history_cap", wc.history_cap);
    wc.softmax_sharpness = w.get<double>("softmax_sharpness", wc.softmax_sharpness);
    wc.cold_item_frac = w.get<double>("cold_item_frac", wc.cold_item_frac);
    wc.cold_user_frac = w.get<double>("cold_user_frac", wc.cold_user_frac);
    wc.seed = w.get<std::uint64_t>("seed", wc.seed);
    {
      Section d = w.sub("drift");
      wc.drift.walk_sigma = d.get<double>("walk_sigma", wc.drift.walk_sigma);
      wc.drift.shock_prob = d.get<double>("shock_prob", wc.drift.shock_prob);
      wc.drift.shock_magnitude =
          d.get<double>("shock_magnitude", wc.drift.shock_magnitude);
      wc.drift.init_sigma = d.get<double>("init_sigma", wc.drift.init_sigma);
      d.finish();
    }
    rc.world_load_path = w.get<std::string>("load_path", "");
    rc.world_save_path = w.get<std::string>("save_path", "");
    w.finish();
  }

  {
    Section s = top.sub("stability");
    StabilityConfig& sc = p.stability;
    sc.eta_s = s.get<double>("eta_s", sc.eta_s);
    sc.eta_l = s.get<double>("eta_l", sc.eta_l);
    sc.lambda_p = s.get<double>("lambda_p", sc.lambda_p);
    sc.lambda_s_max = s.get<double>("lambda_s_max", sc.lambda_s_max);
    sc.kappa_drift = s.get<double>("kappa_drift", sc.kappa_drift);
    sc.gamma = s.get<double>("gamma", sc.gamma);
    s.finish();
  }

  {
    Section r = top.sub("routing");
    p.routing.d_phi = r.get<int>("d_phi", p.routing.d_phi);
    p.routing.tau = r.get<double>("tau", p.routing.tau);
    p.routing.top_m = r.get<int>("top_m", p.routing.top_m);
    std::string sim = r.get<std::string>("similarity", "inner");
    if (sim == "inner") p.routing.similarity = Similarity::inner_product;
    else if (sim == "cosine") p.routing.similarity = Similarity::cosine;
    else throw ConfigError("config.routing.similarity: must be inner|cosine");
    std::string kind = r.get<std::string>("phi_kind", "linear");
    if (kind == "linear") p.routing.phi_kind = EncoderKind::linear;
    else if (kind == "mlp") p.routing.phi_kind = EncoderKind::mlp;
    else throw ConfigError("config.routing.phi_kind: must be linear|mlp");
    r.finish();
  }

  {
    Section a = top.sub("alignment");
    std::string mode = a.get<std::string>("mode", "bregman");
    if (mode == "bregman") p.alignment.mode = AlignmentMode::bregman;
    else if (mode == "wasserstein") p.alignment.mode = AlignmentMode::wasserstein;
    else throw ConfigError("config.alignment.mode: must be bregman|wasserstein");
    std::string gen = a.get<std::string>("bregman", "squared_euclidean");
    if (gen == "squared_euclidean")
      p.alignment.bregman = BregmanKind::squared_euclidean;
    else if (gen == "negative_entropy")
      p.alignment.bregman = BregmanKind::negative_entropy;
    else
      throw ConfigError(
          "config.alignment.bregman: must be squared_euclidean|negative_entropy");
    p.alignment.tau_a = a.get<double>("tau_a", p.alignment.tau_a);
    p.alignment.sinkhorn.epsilon =
        a.get<double>("sinkhorn_epsilon", p.alignment.sinkhorn.epsilon);
    p.alignment.sinkhorn.max_iter =
        a.get<int>("sinkhorn_max_iter", p.alignment.sinkhorn.max_iter);
    p.alignment.sinkhorn.tol = a.get<double>("sinkhorn_tol", p.alignment.sinkhorn.tol);
    p.alignment.history_atoms = a.get<int>("history_atoms", p.alignment.history_atoms);
    a.finish();
  }

  {
    Section s = top.sub("server");
    p.server.prototypes = s.get<int>("K", p.server.prototypes);
    std::string agg = s.get<std::string>("aggregator", "kmeans");
    if (agg == "kmeans") p.server.agg.kind = AggregatorKind::dp_fedkmeans;
    else if (agg == "median") p.server.agg.kind = AggregatorKind::geometric_median;
    else if (agg == "barycenter")
      p.server.agg.kind = AggregatorKind::wasserstein_barycenter;
    else
      throw ConfigError("config.server.aggregator: must be kmeans|median|barycenter");
    p.server.agg.beta = s.get<double>("beta", p.server.agg.beta);
    p.server.agg.clip_radius = s.get<double>("clip_radius", p.server.agg.clip_radius);
    p.server.agg.separation_max_sweeps =
        s.get<int>("separation_max_sweeps", p.server.agg.separation_max_sweeps);
    p.server.agg.barycenter_support =
        s.get<int>("barycenter_support", p.server.agg.barycenter_support);
    p.server.rho_sep = s.get<double>("rho_sep", p.server.rho_sep);
    p.server.tau_util = s.get<double>("tau_util", p.server.tau_util);
    p.server.server_sigma = s.get<double>("sigma", p.server.server_sigma);
    p.server.init_scale = s.get<double>("init_scale", p.server.init_scale);
    p.server.upload_window_cap =
        s.get<int>("upload_window_cap", p.server.upload_window_cap);
    s.finish();
  }

  {
    Section d = top.sub("dp");
    p.privacy.dp.sigma = d.get<double>("sigma", p.privacy.dp.sigma);
    p.privacy.dp.delta = d.get<double>("delta", p.privacy.dp.delta);
    p.privacy.dp.clip_radius = d.get<double>("clip_radius", p.privacy.dp.clip_radius);
    p.privacy.dp.rounds = d.get<long>("rounds", p.privacy.dp.rounds);
    p.privacy.dp.upload_period =
        d.get<long>("upload_period", p.privacy.dp.upload_period);
    p.privacy.dp.drift_trigger =
        d.get<double>("drift_trigger", p.privacy.dp.drift_trigger);
    p.privacy.d_c = d.get<int>("d_c", p.privacy.d_c);
    p.privacy.quantize = d.get<bool>("quantize", p.privacy.quantize);
    rc.dp_sweep_sigmas =
        d.get<std::vector<double>>("sweep_sigmas", rc.dp_sweep_sigmas);
    d.finish();
  }

  {
    Section b = top.sub("backbone");
    std::string loss = b.get<std::string>("loss", "bce");
    if (loss == "bce") p.loss = LossKind::bce;
    else if (loss == "bpr") p.loss = LossKind::bpr;
    else throw ConfigError("config.backbone.loss: must be bce|bpr");
    b.finish();
  }

  {
    Section o = top.sub("orchestrator");
    p.orch.rounds_per_slice = o.get<int>("rounds_per_slice", p.orch.rounds_per_slice);
    p.orch.client_fraction = o.get<double>("client_fraction", p.orch.client_fraction);
    p.orch.eval_fraction = o.get<double>("eval_fraction", p.orch.eval_fraction);
    p.orch.feedback_prob = o.get<double>("feedback_prob", p.orch.feedback_prob);
    p.orch.adaptive_lambda = o.get<bool>("adaptive_lambda", p.orch.adaptive_lambda);
    p.orch.lambda_s_fixed = o.get<double>("lambda_s_fixed", p.orch.lambda_s_fixed);
    p.orch.train_negatives = o.get<int>("train_negatives", p.orch.train_negatives);
    p.orch.trajectory_eval_events =
        o.get<int>("trajectory_eval_events", p.orch.trajectory_eval_events);
    p.orch.reset_short_each_slice =
        o.get<bool>("reset_short_each_slice", p.orch.reset_short_each_slice);
    {
      Section ab = o.sub("ablation");
      p.orch.ablation.no_align = ab.get<bool>("no_align", false);
      p.orch.ablation.no_short = ab.get<bool>("no_short", false);
      p.orch.ablation.no_long = ab.get<bool>("no_long", false);
      p.orch.ablation.static_prototypes = ab.get<bool>("static_prototypes", false);
      ab.finish();
    }
    o.finish();
  }

  {
    Section t = top.sub("theory");
    rc.theory_instances = t.get<int>("instances", rc.theory_instances);
    rc.theory_seed = t.get<std::uint64_t>("seed", rc.theory_seed);
    rc.theory_inject_violation =
        t.get<bool>("inject_violation", rc.theory_inject_violation);
    t.finish();
  }

  top.finish();

  // Cross-field validation mirrors module preconditions; violations are
  // configuration errors here.
  try {
    p.world.validate();
    p.stability.validate();
    p.privacy.dp.validate();
    p.server.agg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (p.routing.phi_kind == EncoderKind::linear && p.world.d < p.routing.d_phi)
    throw ConfigError("config.routing.d_phi: linear encoder needs world.d >= d_phi");
  if (p.privacy.d_c > p.routing.d_phi)
    throw ConfigError("config.dp.d_c: must not exceed routing.d_phi");
  if (p.server.prototypes < 1)
    throw ConfigError("config.server.K: must be at least 1");
  if (p.orch.rounds_per_slice < 1)
    throw ConfigError("config.orchestrator.rounds_per_slice: must be at least 1");
  if (p.orch.client_fraction <= 0.0 || p.orch.client_fraction > 1.0)
    throw ConfigError("config.orchestrator.client_fraction: must be in (0,1]");
  if (p.orch.eval_fraction <= 0.0 || p.orch.eval_fraction >= 1.0)
    throw ConfigError("config.orchestrator.eval_fraction: must be in (0,1)");
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + " (" + cfg_detail::line_of_offset(text, e.byte) +
                      "): " + e.what());
  }
  return parse_config_json(root);
}

}  // namespace protofed
