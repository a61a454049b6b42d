#pragma once

#include "protofed/alignment.hpp"
#include "protofed/backbone.hpp"
#include "protofed/encoder.hpp"
#include "protofed/metrics.hpp"
#include "protofed/privacy.hpp"
#include "protofed/prompt.hpp"
#include "protofed/routing.hpp"
#include "protofed/server.hpp"
#include "protofed/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <deque>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace protofed {

struct RoutingParams {
  int d_phi = 128;
  double tau = 0.07;
  int top_m = 4;
  Similarity similarity = Similarity::inner_product;
  EncoderKind phi_kind = EncoderKind::linear;
};

enum class AlignmentMode { bregman, wasserstein };

struct AlignmentConfig {
  AlignmentMode mode = AlignmentMode::bregman;
  BregmanKind bregman = BregmanKind::squared_euclidean;
  double tau_a = 0.1;
  SinkhornParams sinkhorn;
  int history_atoms = 8;  // recent query embeddings kept per client
};

struct ServerParams {
  int prototypes = 128;  // K
  AggregatorConfig agg;
  double rho_sep = 0.5;
  double tau_util = 0.01;
  double server_sigma = 0.0;  // Eq-8 server-side noise, off by default
  double init_scale = 0.5;
  int upload_window_cap = 512;
};

struct PrivacyParams {
  DPConfig dp;
  int d_c = 64;
  bool quantize = true;
};

enum class LossKind { bce, bpr };

struct AblationFlags {
  bool no_align = false;          // lambda_s = 0
  bool no_short = false;          // alpha = 0
  bool no_long = false;           // p_long frozen at zero
  bool static_prototypes = false; // no federated updates
};

struct OrchestratorParams {
  int rounds_per_slice = 10;
  double client_fraction = 0.05;
  double eval_fraction = 0.2;
  double feedback_prob = 0.0;  // in-session short step during fresh evals
  bool adaptive_lambda = true;
  double lambda_s_fixed = 0.5;
  int train_negatives = 0;  // 0 trains on the full candidate set
  int trajectory_eval_events = 0;  // 0 scores the full eval shard per round
  bool reset_short_each_slice = true;  // p_short is per-period state
  AblationFlags ablation;
};

struct RunParams {
  std::uint64_t seed = 1;
  int prompt_rows = 8;  // L_p
  WorldConfig world;
  StabilityConfig stability;
  RoutingParams routing;
  AlignmentConfig alignment;
  ServerParams server;
  PrivacyParams privacy;
  LossKind loss = LossKind::bce;
  OrchestratorParams orch;
};

struct ClientState {
  DualPromptState prompt;
  long local_steps = 0;
  long uploads_made = 0;
  std::deque<Vector> recent_queries;  // d_phi atoms for the wasserstein mode
};

struct RunState {
  std::vector<ClientState> clients;
  PrototypeLibrary library;
  PrivacyAccountant accountant;
  std::deque<Vector> upload_window;
  int slice_cursor = 0;
  std::vector<std::string> flags;
};

struct RunResult {
  MetricsReport report;
  AccuracyMatrix accuracy;
  std::vector<std::string> flags;
  RunState state;  // final state, used by recovery checks
  std::vector<std::vector<std::pair<long, double>>> trajectories;
  std::vector<double> slice_wall_ms;
};

struct ClientRoundResult {
  std::vector<Vector> uploads;  // lifted to d_phi
  int steps = 0;
};

// Runs Algorithms client-update / server-aggregate / online-inference over a
// synthetic world, slice by slice, and assembles the metrics report.
class Orchestrator {
 public:
  Orchestrator(const World& world, const RunParams& params)
      : world_(world),
        params_(params),
        phi_(make_phi(world, params)),
        query_enc_(Encoder::mlp(1, world.config.d, params.routing.d_phi,
                                params.seed, "query_encoder")),
        decoder_(make_decoder(phi_)),
        scorer_(FrozenScorer::from_table(world.item_embeddings, params.seed)),
        compressor_(Compressor::make(params.routing.d_phi,
                                     std::min(params.privacy.d_c, params.routing.d_phi),
                                     params.privacy.quantize, params.seed)),
        accuracy_(world.config.n_slices) {
    params_.stability.validate();
    params_.privacy.dp.validate();
    init_state();
    split_events();
    init_strata();
  }

  const RunState& state() const { return state_; }
  const Encoder& phi() const { return phi_; }
  const Encoder& query_encoder() const { return query_enc_; }
  const PromptDecoder& decoder() const { return decoder_; }
  const FrozenScorer& scorer() const { return scorer_; }

  // --- Algorithm 1: one client pass over its current-slice train shard ---
  ClientRoundResult client_round(int user, int slice,
                                 const PrototypeLibrary& library_snapshot) {
    ClientRoundResult out;
    ClientState& cs = state_.clients[user];
    const auto& shard = train_events_[slice][user];
    for (int ev_idx : shard) {
      const Event& ev = world_.slices[slice].events[ev_idx];
      train_on_event(cs, user, ev, library_snapshot, out);
    }
    return out;
  }

  // --- Algorithm 2: aggregate -> separation -> prune, in that order ---
  void server_round(const RoundUploads& uploads, int slice, int round) {
    std::uint64_t seed =
        params_.seed ^ (0x5e4e12ULL + std::uint64_t(slice) * 1000 + round);
    aggregate_step(uploads, state_.library, params_.server.agg,
                   params_.server.server_sigma, seed);
    if (uploads.empty()) return;  // utilization zeroed, library untouched
    enforce_separation(state_.library, params_.server.rho_sep,
                       params_.server.agg.separation_max_sweeps, decoder_, phi_,
                       seed);
    if (!state_.library.separation_feasible)
      state_.flags.push_back("violation:separation_infeasible");
    for (const Vector& v : uploads.vectors) {
      state_.upload_window.push_back(v);
      if (int(state_.upload_window.size()) > params_.server.upload_window_cap)
        state_.upload_window.pop_front();
    }
    std::vector<Vector> window(state_.upload_window.begin(),
                               state_.upload_window.end());
    PruneResult pr = prune_or_reinit(state_.library, window, decoder_, phi_,
                                     seed ^ 0x9e37ULL,
                                     params_.server.agg.separation_max_sweeps);
    if (pr.skipped_empty_window) state_.flags.push_back("note:prune_empty_window");
  }

  // --- Algorithm 3: route, compose, score, rank; optional in-session step ---
  std::vector<Candidate> online_inference(int user, const Event& ev,
                                          ClientState& cs,
                                          const PrototypeLibrary& library,
                                          bool allow_feedback,
                                          std::uint64_t feedback_seed = 0) {
    Vector q = query_context(ev);
    Vector h = query_enc_.encode_vector(q);
    Matrix composed = compose_for(cs, h, library, /*observe=*/false);

    std::vector<Candidate> cands = score_candidates(ev, composed);
    if (allow_feedback && params_.orch.feedback_prob > 0.0) {
      RngStream rng = RngStream::derive(feedback_seed, "feedback", user);
      if (rng.bernoulli(params_.orch.feedback_prob) &&
          !params_.orch.ablation.no_short) {
        std::vector<double> dscore = loss_gradient(cands);
        Matrix grad_comp =
            scorer_.prompt_loss_gradient(ev.history, composed, cands, dscore);
        double alpha = session_alpha_for(cs, h);
        short_update(cs.prompt, (alpha * grad_comp).eval(), params_.stability);
      }
    }
    return cands;
  }

  // Trains and evaluates one slice, advancing the cursor.
  void advance_slice() {
    const int T = world_.config.n_slices;
    if (int(trajectories_.size()) != T) trajectories_.assign(T, {});
    require_state(state_.slice_cursor < T, "advance_slice: run already complete");
    auto t0 = std::chrono::steady_clock::now();
    run_slice(state_.slice_cursor);
    auto t1 = std::chrono::steady_clock::now();
    slice_wall_ms_.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
    state_.slice_cursor++;
    if (!checkpoint_path_.empty()) save_checkpoint(checkpoint_path_);
  }

  RunResult run() {
    while (state_.slice_cursor < world_.config.n_slices) advance_slice();
    return finalize_result();
  }

  RunResult finalize_result() { return finalize(); }

  const std::vector<int>& train_shard(int slice, int user) const {
    return train_events_[slice][user];
  }
  const std::vector<int>& eval_shard(int slice) const {
    return eval_events_[slice];
  }
  const std::vector<QueryRecord>& query_records() const { return query_records_; }

  void set_checkpoint_path(const std::string& path) { checkpoint_path_ = path; }

  // ------------------------------------------------------------------
  // Checkpointing (versioned JSON; enough state to resume mid-run)
  // ------------------------------------------------------------------
  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  static Encoder make_phi(const World& world, const RunParams& params) {
    if (params.routing.phi_kind == EncoderKind::linear)
      return Encoder::linear(params.prompt_rows, world.config.d,
                             params.routing.d_phi, params.seed, "prompt_encoder");
    return Encoder::mlp(params.prompt_rows, world.config.d, params.routing.d_phi,
                        params.seed, "prompt_encoder");
  }

  static PromptDecoder make_decoder(const Encoder& phi) {
    if (phi.kind() == EncoderKind::linear)
      return PromptDecoder::from_encoder(phi);
    return PromptDecoder::from_mlp(phi);
  }

  void init_state();
  void split_events();
  void init_strata();
  void run_slice(int t);
  RunResult finalize();

  Vector query_context(const Event& ev) const {
    Vector q = Vector::Zero(world_.config.d);
    for (int id : ev.history)
      q += world_.item_embeddings.row(id).transpose();
    if (!ev.history.empty()) q /= double(ev.history.size());
    return q;
  }

  double session_alpha_for(const ClientState& cs, const Vector& /*h*/) const {
    if (params_.orch.ablation.no_short) return 0.0;
    return session_alpha(cs.prompt);
  }

  Matrix compose_for(const ClientState& cs, const Vector& h,
                     const PrototypeLibrary& library, bool observe) {
    (void)observe;
    RoutingResult routing = route(h, library.encoded, params_.routing.top_m,
                                  params_.routing.tau, params_.routing.similarity);
    std::vector<std::pair<double, const Matrix*>> retrieved;
    for (std::size_t i = 0; i < routing.indices.size(); ++i)
      retrieved.push_back(
          {routing.weights[i], &library.prototypes[routing.indices[i]]});
    double alpha = session_alpha_for(cs, h);
    return compose_prompt(cs.prompt, alpha, retrieved);
  }

  std::vector<Candidate> score_candidates(const Event& ev,
                                          const Matrix& composed) const {
    Vector qv = scorer_.query_vector(ev.history, composed);
    std::vector<Candidate> cands;
    cands.reserve(ev.candidates.size());
    for (int i = 0; i < int(ev.candidates.size()); ++i) {
      Candidate c;
      c.item_id = ev.candidates[i];
      c.label = (i == ev.positive_pos) ? 1 : 0;
      c.score = scorer_.score_with_query(qv, c.item_id);
      cands.push_back(c);
    }
    return cands;
  }

  // d(loss)/d(score) per candidate for the configured loss.
  std::vector<double> loss_gradient(const std::vector<Candidate>& cands) const {
    std::vector<double> dscore(cands.size(), 0.0);
    if (params_.loss == LossKind::bce) {
      std::vector<std::pair<double, int>> sl;
      for (const Candidate& c : cands) sl.push_back({c.score, c.label});
      LossResult lr = bce_loss(sl);
      dscore = lr.grad;
    } else {
      int pos = -1;
      for (int i = 0; i < int(cands.size()); ++i)
        if (cands[i].label == 1) pos = i;
      std::vector<std::pair<double, double>> pairs;
      for (int i = 0; i < int(cands.size()); ++i)
        if (i != pos) pairs.push_back({cands[pos].score, cands[i].score});
      LossResult lr = bpr_loss(pairs);
      int k = 0;
      for (int i = 0; i < int(cands.size()); ++i) {
        if (i == pos) continue;
        dscore[pos] += lr.grad[2 * k];
        dscore[i] += lr.grad[2 * k + 1];
        ++k;
      }
    }
    return dscore;
  }

  // Training view of an event: the positive plus a deterministic negative
  // subsample (the candidate list is already uniformly shuffled at world
  // generation). Evaluation always scores the full candidate set.
  Event training_view(const Event& ev) const {
    int k = params_.orch.train_negatives;
    if (k <= 0 || k + 1 >= int(ev.candidates.size())) return ev;
    Event out;
    out.user = ev.user;
    out.history = ev.history;
    out.candidates.push_back(ev.candidates[ev.positive_pos]);
    out.positive_pos = 0;
    for (int i = 0; i < int(ev.candidates.size()) && int(out.candidates.size()) < k + 1; ++i)
      if (i != ev.positive_pos) out.candidates.push_back(ev.candidates[i]);
    return out;
  }

  double lambda_s_for(const ClientState& cs) const {
    if (params_.orch.ablation.no_align) return 0.0;
    if (!params_.orch.adaptive_lambda) return params_.orch.lambda_s_fixed;
    return adaptive_lambda_s(cs.prompt.drift.drift_mean(), params_.stability);
  }

  void train_on_event(ClientState& cs, int user, const Event& ev,
                      const PrototypeLibrary& library, ClientRoundResult& out) {
    Vector q = query_context(ev);
    Vector h = query_enc_.encode_vector(q);
    cs.prompt.drift.observe(h);
    if (params_.alignment.mode == AlignmentMode::wasserstein) {
      cs.recent_queries.push_back(h);
      if (int(cs.recent_queries.size()) > params_.alignment.history_atoms)
        cs.recent_queries.pop_front();
    }

    Matrix composed = compose_for(cs, h, library, /*observe=*/true);
    Event train_ev = training_view(ev);
    std::vector<Candidate> cands = score_candidates(train_ev, composed);
    std::vector<double> dscore = loss_gradient(cands);
    Matrix grad_comp =
        scorer_.prompt_loss_gradient(train_ev.history, composed, cands, dscore);

    // Short-term (fast, sparse) update.
    if (!params_.orch.ablation.no_short) {
      double alpha = session_alpha_for(cs, h);
      short_update(cs.prompt, (alpha * grad_comp).eval(), params_.stability);
    }

    // Long-term (slow, prototype-aligned) update.
    if (!params_.orch.ablation.no_long) {
      double lambda_s = lambda_s_for(cs);
      if (params_.alignment.mode == AlignmentMode::bregman || lambda_s == 0.0) {
        AlignmentParams ap;
        ap.generator.kind = params_.alignment.bregman;
        ap.tau_a = params_.alignment.tau_a;
        long_update(cs.prompt, grad_comp, library, phi_, lambda_s,
                    params_.stability, ap);
      } else {
        Matrix grad = grad_comp;
        grad += lambda_s * wasserstein_prompt_gradient(cs, library);
        cs.prompt.p_long -= params_.stability.eta_l * grad;
      }
    }

    cs.local_steps++;
    out.steps++;
    slice_local_steps_++;

    // Periodic or drift-triggered DP release.
    if (!params_.orch.ablation.static_prototypes &&
        should_upload(cs.local_steps, cs.prompt.drift.current_drift(),
                      params_.privacy.dp)) {
      Vector z = make_upload(
          cs.prompt.p_long, phi_, compressor_, params_.privacy.dp,
          params_.seed ^ (0xa11ceULL + std::uint64_t(user) * 7919 +
                          std::uint64_t(cs.uploads_made)));
      out.uploads.push_back(compressor_.lift(z));
      cs.uploads_made++;
      state_.accountant.record(user);
      upload_bytes_ += compressor_.payload_bytes();
    }
  }

  // Entropic-transport pull of phi(p_long) toward the prototype mixture: the
  // client's recent query atoms plus the prompt embedding form the source
  // measure; the plan is held fixed for the gradient.
  Matrix wasserstein_prompt_gradient(const ClientState& cs,
                                     const PrototypeLibrary& library) {
    Vector z = phi_.encode_prompt(cs.prompt.p_long);
    EmpiricalMeasure mu;
    for (const Vector& v : cs.recent_queries) mu.atoms.push_back(v);
    mu.atoms.push_back(z);
    mu.weights.assign(mu.atoms.size(), 1.0 / double(mu.atoms.size()));
    EmpiricalMeasure nu;
    nu.atoms = library.encoded;
    nu.weights.assign(library.size(), 1.0 / double(library.size()));
    SinkhornResult sr = sinkhorn_transport(
        mu, nu, params_.alignment.sinkhorn.epsilon,
        params_.alignment.sinkhorn.max_iter, params_.alignment.sinkhorn.tol);
    if (!sr.converged) state_.flags.push_back("note:sinkhorn_nonconverged");
    Vector gz = transport_atom_gradient(sr, mu, nu, int(mu.atoms.size()) - 1);
    // The z atom carries 1/n of the measure; rescale to a unit-mass pull.
    gz *= double(mu.atoms.size());
    return phi_.prompt_gradient(cs.prompt.p_long, gz);
  }

  // Mean NDCG@10 over a slice's eval shard; optionally records per-query
  // ranks and top-10 lists (used for the fresh diagonal evaluations).
  double evaluate_slice(int slice, bool record, bool scratch_model = false,
                        int max_events = 0);

  const World& world_;
  RunParams params_;
  Encoder phi_;
  Encoder query_enc_;
  PromptDecoder decoder_;
  FrozenScorer scorer_;
  Compressor compressor_;

  RunState state_;
  AccuracyMatrix accuracy_;
  std::vector<std::vector<std::vector<int>>> train_events_;  // [slice][user]
  std::vector<std::vector<int>> eval_events_;                // [slice]
  ExposureStrata strata_;
  std::vector<QueryRecord> query_records_;
  std::vector<std::vector<std::pair<long, double>>> trajectories_;
  long slice_local_steps_ = 0;
  long upload_bytes_ = 0;
  std::vector<double> slice_wall_ms_;
  std::string checkpoint_path_;
};

// ---------------------------------------------------------------------------

inline void Orchestrator::init_state() {
  const int n = world_.config.n_users;
  state_.clients.clear();
  state_.clients.reserve(n);
  for (int u = 0; u < n; ++u) {
    ClientState cs;
    cs.prompt = DualPromptState::zeros(phi_.prompt_rows(), world_.config.d,
                                       params_.routing.d_phi);
    // Fixed configured scaling vector; a small seeded draw keeps the
    // session gate responsive without training it.
    RngStream rng = RngStream::derive(params_.seed, "alpha_params", u);
    cs.prompt.alpha_params = rng.gaussian_vector(params_.routing.d_phi, 0.3);
    state_.clients.push_back(std::move(cs));
  }
  state_.accountant.init(n);

  PrototypeLibrary& lib = state_.library;
  lib.rho_sep = params_.server.rho_sep;
  lib.tau_util = params_.server.tau_util;
  RngStream rng = RngStream::derive(params_.seed, "library_init");
  lib.encoded.clear();
  for (int k = 0; k < params_.server.prototypes; ++k)
    lib.encoded.push_back(
        rng.gaussian_vector(params_.routing.d_phi, params_.server.init_scale));
  lib.utilization.assign(lib.encoded.size(), 1.0);
  lib.sync_from_encoded(decoder_, phi_);
  enforce_separation(lib, lib.rho_sep, params_.server.agg.separation_max_sweeps,
                     decoder_, phi_, params_.seed);
}

inline void Orchestrator::split_events() {
  const int T = world_.config.n_slices;
  const int n = world_.config.n_users;
  train_events_.assign(T, std::vector<std::vector<int>>(n));
  eval_events_.assign(T, {});
  for (int t = 0; t < T; ++t) {
    std::vector<std::vector<int>> per_user(n);
    const auto& events = world_.slices[t].events;
    for (int i = 0; i < int(events.size()); ++i)
      per_user[events[i].user].push_back(i);
    for (int u = 0; u < n; ++u) {
      const auto& idx = per_user[u];
      if (idx.empty()) continue;
      int n_eval = std::max(
          1, int(std::round(params_.orch.eval_fraction * double(idx.size()))));
      n_eval = std::min(n_eval, int(idx.size()));
      int n_train = int(idx.size()) - n_eval;
      for (int i = 0; i < n_train; ++i) train_events_[t][u].push_back(idx[i]);
      for (int i = n_train; i < int(idx.size()); ++i)
        eval_events_[t].push_back(idx[i]);
    }
  }
}

inline void Orchestrator::init_strata() {
  const int n_items = world_.config.n_items;
  std::vector<long> counts(n_items, 0);
  for (const InteractionSlice& s : world_.slices)
    for (const Event& e : s.events) counts[e.candidates[e.positive_pos]]++;
  std::vector<int> order(n_items);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return counts[a] > counts[b]; });
  strata_.head_item.assign(n_items, false);
  for (int r = 0; r < n_items / 10; ++r) strata_.head_item[order[r]] = true;

  strata_.high_activity.assign(world_.config.n_users, false);
  strata_.low_activity.assign(world_.config.n_users, false);
  for (int u = 0; u < world_.config.n_users; ++u) {
    strata_.high_activity[u] = world_.users[u].activity == ActivityLevel::heavy;
    strata_.low_activity[u] = world_.users[u].activity == ActivityLevel::light;
  }
}

inline double Orchestrator::evaluate_slice(int slice, bool record,
                                           bool scratch_model, int max_events) {
  std::vector<int> idx = eval_events_[slice];
  if (idx.empty()) return 0.0;
  if (max_events > 0 && int(idx.size()) > max_events) {
    // Deterministic stride subsample of the eval shard.
    std::vector<int> picked;
    double stride = double(idx.size()) / double(max_events);
    for (int i = 0; i < max_events; ++i) picked.push_back(idx[int(i * stride)]);
    idx = std::move(picked);
  }
  ClientState scratch;
  if (scratch_model)
    scratch.prompt = DualPromptState::zeros(phi_.prompt_rows(), world_.config.d,
                                            params_.routing.d_phi);
  double acc = 0.0;
  for (int ev_idx : idx) {
    const Event& ev = world_.slices[slice].events[ev_idx];
    ClientState& cs = scratch_model ? scratch : state_.clients[ev.user];
    // Evaluation is read-only: feedback disabled, drift tracker untouched.
    std::vector<Candidate> cands =
        online_inference(ev.user, ev, cs, state_.library, false);
    int r = positive_rank(cands);
    acc += ndcg_at(r, 10);
    if (record) {
      QueryRecord qr;
      qr.user = ev.user;
      qr.slice = slice;
      qr.rank = r;
      std::vector<int> order = rank(cands);
      for (int i = 0; i < std::min<int>(10, int(order.size())); ++i)
        qr.top_items.push_back(cands[order[i]].item_id);
      query_records_.push_back(std::move(qr));
    }
  }
  return acc / double(idx.size());
}

inline void Orchestrator::run_slice(int t) {
  // Forward-transfer reference points, before any training on slice t.
  if (t >= 1) accuracy_.set(t, t - 1, evaluate_slice(t, false));
  accuracy_.scratch[t] = evaluate_slice(t, false, /*scratch_model=*/true);

  // Active users: joined and holding train events this slice.
  std::vector<int> active;
  for (int u = 0; u < world_.config.n_users; ++u)
    if (!train_events_[t][u].empty()) active.push_back(u);

  slice_local_steps_ = 0;
  std::vector<bool> participated(world_.config.n_users, false);
  long participants = 0;
  int per_round = std::max(
      1, int(std::round(params_.orch.client_fraction * double(active.size()))));
  for (int r = 0; r < params_.orch.rounds_per_slice; ++r) {
    RngStream rng = RngStream::derive(params_.seed, "client_sampling", t, r);
    std::vector<int> perm = rng.sample_without_replacement(
        int(active.size()), std::min(per_round, int(active.size())));
    RoundUploads uploads;
    const PrototypeLibrary& snapshot = state_.library;  // frozen for the round
    std::vector<std::pair<int, std::vector<Vector>>> collected;
    for (int pick : perm) {
      int user = active[pick];
      if (!participated[user]) {
        participated[user] = true;
        ++participants;
      }
      ClientRoundResult cr = client_round(user, t, snapshot);
      collected.push_back({user, std::move(cr.uploads)});
    }
    // Deterministic server view regardless of client execution order.
    std::sort(collected.begin(), collected.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [user, vecs] : collected)
      for (Vector& v : vecs) {
        uploads.client_ids.push_back(user);
        uploads.vectors.push_back(std::move(v));
      }
    if (!params_.orch.ablation.static_prototypes)
      server_round(uploads, t, r);
    // Trajectory x-axis: mean local gradient steps per participating client.
    long mean_steps =
        participants > 0 ? (slice_local_steps_ + participants - 1) / participants : 0;
    trajectories_[t].push_back(
        {mean_steps,
         evaluate_slice(t, false, false, params_.orch.trajectory_eval_events)});
  }

  // Retention scan plus the fresh diagonal evaluation, with the session
  // state still live.
  for (int s = 0; s <= t; ++s)
    accuracy_.set(s, t, evaluate_slice(s, /*record=*/s == t));

  // Slice boundary: advance drift trackers; the session prompt is
  // per-period state and starts fresh next slice.
  for (int u : active) {
    state_.clients[u].prompt.drift.end_slice();
    if (params_.orch.reset_short_each_slice)
      state_.clients[u].prompt.p_short.setZero();
  }
}

inline RunResult Orchestrator::finalize() {
  RunResult out;
  out.accuracy = accuracy_;
  out.flags = state_.flags;
  out.trajectories = trajectories_;

  MetricsReport& rep = out.report;
  const int T = world_.config.n_slices;
  rep.per_slice.assign(T, {});
  for (const QueryRecord& q : query_records_) {
    SliceAccuracy& sa = rep.per_slice[q.slice];
    for (int ki = 0; ki < 3; ++ki) {
      sa.hr[ki] += hit_rate_at(q.rank, kRankCutoffs[ki]);
      sa.ndcg[ki] += ndcg_at(q.rank, kRankCutoffs[ki]);
      sa.mrr[ki] += mrr_at(q.rank, kRankCutoffs[ki]);
    }
    sa.queries++;
  }
  for (SliceAccuracy& sa : rep.per_slice) {
    if (sa.queries == 0) continue;
    for (int ki = 0; ki < 3; ++ki) {
      sa.hr[ki] /= double(sa.queries);
      sa.ndcg[ki] /= double(sa.queries);
      sa.mrr[ki] /= double(sa.queries);
    }
  }

  rep.af = average_forgetting(accuracy_);
  rep.bwt = backward_transfer(accuracy_);
  rep.fwt = forward_transfer(accuracy_);
  for (int t = 0; t < T; ++t) {
    rep.steps_to_95_per_slice.push_back(steps_to_95(trajectories_[t]));
    rep.ndcg10_mean += accuracy_.at(t, t);
    rep.ndcg10_final_mean += accuracy_.at(t, T - 1);
  }
  rep.ndcg10_mean /= double(T);
  rep.ndcg10_final_mean /= double(T);
  double steps_sum = 0.0;
  for (long s : rep.steps_to_95_per_slice) steps_sum += double(s);
  rep.mean_steps_to_95 = steps_sum / double(T);

  exposure_disparity(query_records_, strata_, rep);

  rep.trainable_params_per_client =
      2L * phi_.prompt_rows() * world_.config.d + params_.routing.d_phi;
  rep.upload_bytes_total = upload_bytes_;
  rep.upload_count = state_.accountant.total_releases;
  DPConfig one = params_.privacy.dp;
  one.rounds = 1;
  rep.epsilon_per_release = params_.privacy.dp.sigma > 0.0 ? epsilon_for(one) : 0.0;
  rep.epsilon_composed = params_.privacy.dp.sigma > 0.0
                             ? state_.accountant.composed_epsilon(params_.privacy.dp)
                             : std::numeric_limits<double>::infinity();
  out.slice_wall_ms = slice_wall_ms_;
  out.state = state_;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json mat_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline Matrix mat_from_json(const nlohmann::json& rows) {
  int nr = int(rows.size());
  int nc = nr > 0 ? int(rows[0].size()) : 0;
  Matrix m(nr, nc);
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < nc; ++c) m(r, c) = rows[r][c].get<double>();
  return m;
}

}  // namespace detail

inline void Orchestrator::save_checkpoint(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "protofed-checkpoint";
  j["version"] = kCheckpointVersion;
  j["seed"] = params_.seed;
  j["world_seed"] = world_.config.seed;
  j["slice_cursor"] = state_.slice_cursor;
  j["flags"] = state_.flags;
  j["upload_bytes"] = upload_bytes_;

  nlohmann::json clients = nlohmann::json::array();
  for (const ClientState& cs : state_.clients) {
    nlohmann::json c;
    c["p_long"] = detail::mat_to_json(cs.prompt.p_long);
    c["p_short"] = detail::mat_to_json(cs.prompt.p_short);
    c["alpha"] = detail::vec_to_json(cs.prompt.alpha_params);
    c["drift_prev"] = detail::vec_to_json(cs.prompt.drift.rolling_mean_prev);
    c["drift_curr"] = detail::vec_to_json(cs.prompt.drift.rolling_mean_curr);
    c["drift_window"] = cs.prompt.drift.window;
    c["drift_history"] = cs.prompt.drift.drift_history;
    c["steps"] = cs.local_steps;
    c["uploads"] = cs.uploads_made;
    nlohmann::json rq = nlohmann::json::array();
    for (const Vector& v : cs.recent_queries) rq.push_back(detail::vec_to_json(v));
    c["recent_queries"] = rq;
    clients.push_back(std::move(c));
  }
  j["clients"] = std::move(clients);

  nlohmann::json lib;
  nlohmann::json enc = nlohmann::json::array();
  for (const Vector& v : state_.library.encoded) enc.push_back(detail::vec_to_json(v));
  lib["encoded"] = enc;
  nlohmann::json protos = nlohmann::json::array();
  for (const Matrix& m : state_.library.prototypes)
    protos.push_back(detail::mat_to_json(m));
  lib["prototypes"] = protos;
  lib["utilization"] = state_.library.utilization;
  lib["feasible"] = state_.library.separation_feasible;
  j["library"] = std::move(lib);

  j["accountant_total"] = state_.accountant.total_releases;
  j["accountant_per_client"] = state_.accountant.per_client;
  nlohmann::json window = nlohmann::json::array();
  for (const Vector& v : state_.upload_window) window.push_back(detail::vec_to_json(v));
  j["upload_window"] = std::move(window);

  nlohmann::json acc = nlohmann::json::array();
  for (int s = 0; s < accuracy_.T; ++s)
    for (int t = 0; t < accuracy_.T; ++t)
      if (!std::isnan(accuracy_.A(s, t)))
        acc.push_back({s, t, accuracy_.A(s, t)});
  j["accuracy"] = std::move(acc);
  nlohmann::json scratch = nlohmann::json::array();
  for (int s = 0; s < accuracy_.T; ++s)
    if (!std::isnan(accuracy_.scratch[s])) scratch.push_back({s, accuracy_.scratch[s]});
  j["scratch"] = std::move(scratch);

  nlohmann::json traj = nlohmann::json::array();
  for (const auto& slice_traj : trajectories_) {
    nlohmann::json one = nlohmann::json::array();
    for (const auto& [step, v] : slice_traj) one.push_back({step, v});
    traj.push_back(std::move(one));
  }
  j["trajectories"] = std::move(traj);

  nlohmann::json queries = nlohmann::json::array();
  for (const QueryRecord& q : query_records_)
    queries.push_back({q.user, q.slice, q.rank, q.top_items});
  j["query_records"] = std::move(queries);

  std::ofstream out(path);
  require_state(bool(out), "save_checkpoint: cannot open " + path);
  out << j.dump() << "\n";
}

inline void Orchestrator::load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  require_state(bool(in), "load_checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  require_state(j.value("format", "") == "protofed-checkpoint",
                "load_checkpoint: not a checkpoint file");
  require_state(j.value("version", -1) == kCheckpointVersion,
                "load_checkpoint: unsupported version");
  require_state(j["world_seed"].get<std::uint64_t>() == world_.config.seed,
                "load_checkpoint: checkpoint belongs to a different world");
  require_state(int(j["clients"].size()) == world_.config.n_users,
                "load_checkpoint: client count mismatch");

  state_.slice_cursor = j["slice_cursor"].get<int>();
  state_.flags = j["flags"].get<std::vector<std::string>>();
  upload_bytes_ = j["upload_bytes"].get<long>();

  for (int u = 0; u < world_.config.n_users; ++u) {
    const nlohmann::json& c = j["clients"][u];
    ClientState& cs = state_.clients[u];
    cs.prompt.p_long = detail::mat_from_json(c["p_long"]);
    cs.prompt.p_short = detail::mat_from_json(c["p_short"]);
    cs.prompt.alpha_params = detail::vec_from_json(c["alpha"]);
    cs.prompt.drift.rolling_mean_prev = detail::vec_from_json(c["drift_prev"]);
    cs.prompt.drift.rolling_mean_curr = detail::vec_from_json(c["drift_curr"]);
    cs.prompt.drift.window = c["drift_window"].get<long>();
    cs.prompt.drift.drift_history = c["drift_history"].get<std::vector<double>>();
    cs.local_steps = c["steps"].get<long>();
    cs.uploads_made = c["uploads"].get<long>();
    cs.recent_queries.clear();
    for (const auto& v : c["recent_queries"])
      cs.recent_queries.push_back(detail::vec_from_json(v));
  }

  const nlohmann::json& lib = j["library"];
  state_.library.encoded.clear();
  for (const auto& v : lib["encoded"])
    state_.library.encoded.push_back(detail::vec_from_json(v));
  state_.library.prototypes.clear();
  for (const auto& m : lib["prototypes"])
    state_.library.prototypes.push_back(detail::mat_from_json(m));
  state_.library.utilization = lib["utilization"].get<std::vector<double>>();
  state_.library.separation_feasible = lib["feasible"].get<bool>();

  state_.accountant.total_releases = j["accountant_total"].get<long>();
  state_.accountant.per_client =
      j["accountant_per_client"].get<std::vector<long>>();
  state_.upload_window.clear();
  for (const auto& v : j["upload_window"])
    state_.upload_window.push_back(detail::vec_from_json(v));

  accuracy_.reset(world_.config.n_slices);
  for (const auto& e : j["accuracy"])
    accuracy_.A(e[0].get<int>(), e[1].get<int>()) = e[2].get<double>();
  for (const auto& e : j["scratch"])
    accuracy_.scratch[e[0].get<int>()] = e[1].get<double>();

  trajectories_.clear();
  for (const auto& one : j["trajectories"]) {
    std::vector<std::pair<long, double>> tr;
    for (const auto& p : one) tr.push_back({p[0].get<long>(), p[1].get<double>()});
    trajectories_.push_back(std::move(tr));
  }
  if (int(trajectories_.size()) < world_.config.n_slices)
    trajectories_.resize(world_.config.n_slices);

  query_records_.clear();
  for (const auto& q : j["query_records"]) {
    QueryRecord qr;
    qr.user = q[0].get<int>();
    qr.slice = q[1].get<int>();
    qr.rank = q[2].get<int>();
    qr.top_items = q[3].get<std::vector<int>>();
    query_records_.push_back(std::move(qr));
  }
}

}  // namespace protofed
