#include "protofed/orchestrator.hpp"

#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

using namespace protofed;

namespace {

RunParams toy_params() {
  RunParams p;
  p.seed = 42;
  p.prompt_rows = 4;
  p.world.n_users = 6;
  p.world.n_items = 40;
  p.world.n_true_clusters = 2;
  p.world.n_slices = 3;
  p.world.interactions_per_user_per_slice = 4;
  p.world.d = 8;
  p.world.candidates = 12;
  p.world.history_cap = 5;
  p.world.seed = 3;
  p.routing.d_phi = 4;
  p.routing.top_m = 2;
  p.server.prototypes = 3;
  p.server.agg.clip_radius = 5.0;
  p.privacy.dp.clip_radius = 5.0;
  p.privacy.dp.upload_period = 3;
  p.privacy.d_c = 4;
  p.privacy.quantize = false;
  p.orch.rounds_per_slice = 4;
  p.orch.client_fraction = 0.5;
  p.orch.eval_fraction = 0.25;
  p.orch.adaptive_lambda = false;
  p.orch.lambda_s_fixed = 0.3;
  p.stability.eta_s = 0.1;
  p.stability.eta_l = 0.05;
  return p;
}

}  // namespace

TEST_CASE("client_round matches a straight-line replay") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  Orchestrator subject(world, p);
  Orchestrator reference(world, p);  // identical initial state

  int user = -1;
  for (int u = 0; u < p.world.n_users && user < 0; ++u)
    if (!subject.train_shard(0, u).empty()) user = u;
  REQUIRE(user >= 0);

  const PrototypeLibrary lib_snapshot = subject.state().library;
  ClientRoundResult cr = subject.client_round(user, 0, lib_snapshot);

  // Scripted replay of the client update, using the primitive operations in
  // the published order: route, compose, loss, short update, long update,
  // periodic upload.
  ClientState cs = reference.state().clients[user];
  const Encoder& phi = reference.phi();
  const Encoder& g = reference.query_encoder();
  const FrozenScorer& scorer = reference.scorer();
  Compressor comp = Compressor::make(p.routing.d_phi, p.privacy.d_c,
                                     p.privacy.quantize, p.seed);
  std::vector<Vector> uploads;
  for (int ev_idx : reference.train_shard(0, user)) {
    const Event& ev = world.slices[0].events[ev_idx];
    Vector q = Vector::Zero(p.world.d);
    for (int id : ev.history) q += world.item_embeddings.row(id).transpose();
    if (!ev.history.empty()) q /= double(ev.history.size());
    Vector h = g.encode_vector(q);
    cs.prompt.drift.observe(h);

    RoutingResult routing =
        route(h, lib_snapshot.encoded, p.routing.top_m, p.routing.tau);
    std::vector<std::pair<double, const Matrix*>> retrieved;
    for (std::size_t i = 0; i < routing.indices.size(); ++i)
      retrieved.push_back(
          {routing.weights[i], &lib_snapshot.prototypes[routing.indices[i]]});
    double alpha = session_alpha(cs.prompt);
    Matrix composed = compose_prompt(cs.prompt, alpha, retrieved);

    std::vector<Candidate> cands;
    std::vector<std::pair<double, int>> sl;
    for (int i = 0; i < int(ev.candidates.size()); ++i) {
      Candidate c;
      c.item_id = ev.candidates[i];
      c.label = i == ev.positive_pos ? 1 : 0;
      c.score = scorer.score(ev.history, composed, c.item_id);
      cands.push_back(c);
      sl.push_back({c.score, c.label});
    }
    LossResult lr = bce_loss(sl);
    Matrix grad = scorer.prompt_loss_gradient(ev.history, composed, cands, lr.grad);

    short_update(cs.prompt, (alpha * grad).eval(), p.stability);
    AlignmentParams ap;
    long_update(cs.prompt, grad, lib_snapshot, phi, p.orch.lambda_s_fixed,
                p.stability, ap);
    cs.local_steps++;

    if (should_upload(cs.local_steps, cs.prompt.drift.current_drift(),
                      p.privacy.dp)) {
      Vector z = make_upload(
          cs.prompt.p_long, phi, comp, p.privacy.dp,
          p.seed ^ (0xa11ceULL + std::uint64_t(user) * 7919 +
                    std::uint64_t(cs.uploads_made)));
      uploads.push_back(comp.lift(z));
      cs.uploads_made++;
    }
  }

  const ClientState& got = subject.state().clients[user];
  CHECK((got.prompt.p_long - cs.prompt.p_long).norm() == 0.0);
  CHECK((got.prompt.p_short - cs.prompt.p_short).norm() == 0.0);
  CHECK(got.local_steps == cs.local_steps);
  REQUIRE(cr.uploads.size() == uploads.size());
  for (std::size_t i = 0; i < uploads.size(); ++i)
    CHECK((cr.uploads[i] - uploads[i]).norm() == 0.0);
}

TEST_CASE("client_round fixed point with zero gradients") {
  RunParams p = toy_params();
  p.stability.lambda_p = 0.0;
  p.orch.lambda_s_fixed = 0.0;
  p.privacy.dp.upload_period = 1000000;  // no upload before step R
  World world = generate_world(p.world);
  world.item_embeddings.setZero();  // every score and gradient vanishes

  Orchestrator orch(world, p);
  int user = -1;
  for (int u = 0; u < p.world.n_users && user < 0; ++u)
    if (!orch.train_shard(0, u).empty()) user = u;
  REQUIRE(user >= 0);

  Matrix long_before = orch.state().clients[user].prompt.p_long;
  ClientRoundResult cr = orch.client_round(user, 0, orch.state().library);
  CHECK(cr.uploads.empty());
  CHECK((orch.state().clients[user].prompt.p_long - long_before).norm() == 0.0);
  CHECK(orch.state().clients[user].prompt.p_short.norm() == 0.0);
}

TEST_CASE("upload fires when the step counter hits the period") {
  RunParams p = toy_params();
  p.privacy.dp.upload_period = 2;
  World world = generate_world(p.world);
  Orchestrator orch(world, p);
  int user = -1;
  for (int u = 0; u < p.world.n_users; ++u)
    if (int(orch.train_shard(0, u).size()) >= 2) user = u;
  REQUIRE(user >= 0);
  ClientRoundResult cr = orch.client_round(user, 0, orch.state().library);
  int steps = int(orch.train_shard(0, user).size());
  CHECK(int(cr.uploads.size()) == steps / 2);
}

TEST_CASE("server_round equals the manual composition of its three stages") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  Orchestrator subject(world, p);
  Orchestrator reference(world, p);

  RngStream rng(7);
  RoundUploads uploads;
  for (int i = 0; i < 9; ++i) {
    uploads.client_ids.push_back(i % p.world.n_users);
    uploads.vectors.push_back(rng.gaussian_vector(p.routing.d_phi));
  }

  const int slice = 1, round = 2;
  subject.server_round(uploads, slice, round);

  // Manual composition with the same derived seed.
  std::uint64_t seed =
      p.seed ^ (0x5e4e12ULL + std::uint64_t(slice) * 1000 + round);
  PrototypeLibrary lib = reference.state().library;
  aggregate_step(uploads, lib, p.server.agg, p.server.server_sigma, seed);
  enforce_separation(lib, p.server.rho_sep, p.server.agg.separation_max_sweeps,
                     reference.decoder(), reference.phi(), seed);
  std::vector<Vector> window(uploads.vectors.begin(), uploads.vectors.end());
  prune_or_reinit(lib, window, reference.decoder(), reference.phi(),
                  seed ^ 0x9e37ULL, p.server.agg.separation_max_sweeps);

  const PrototypeLibrary& got = subject.state().library;
  REQUIRE(got.size() == lib.size());
  for (int k = 0; k < lib.size(); ++k) {
    CHECK((got.encoded[k] - lib.encoded[k]).norm() == 0.0);
    CHECK(got.utilization[k] == lib.utilization[k]);
  }
}

TEST_CASE("empty server round only zeroes utilization") {
  RunParams p = toy_params();
  World world = generate_world(p.world);
  Orchestrator orch(world, p);
  std::vector<Vector> before = orch.state().library.encoded;
  orch.server_round(RoundUploads{}, 0, 0);
  const PrototypeLibrary& lib = orch.state().library;
  for (int k = 0; k < lib.size(); ++k) {
    CHECK((lib.encoded[k] - before[k]).norm() == 0.0);
    CHECK(lib.utilization[k] == 0.0);
  }
}

TEST_CASE("online_inference") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  SECTION("single prototype and zero prompts rank by prototype content") {
    RunParams p1 = p;
    p1.server.prototypes = 1;
    Orchestrator orch(world, p1);
    // Event with an empty history from the first slice.
    const Event* ev = nullptr;
    for (const Event& e : world.slices[0].events)
      if (e.history.empty()) {
        ev = &e;
        break;
      }
    REQUIRE(ev != nullptr);
    ClientState cs = orch.state().clients[ev->user];
    std::vector<Candidate> got =
        orch.online_inference(ev->user, *ev, cs, orch.state().library, false);
    // Composed prompt must be exactly the single prototype (weight 1).
    const Matrix& proto = orch.state().library.prototypes[0];
    for (std::size_t i = 0; i < got.size(); ++i) {
      double expect = orch.scorer().score({}, proto, got[i].item_id);
      CHECK(got[i].score == Catch::Approx(expect).margin(1e-12));
    }
  }

  SECTION("feedback disabled leaves the state untouched") {
    Orchestrator orch(world, p);
    const Event& ev = world.slices[0].events[0];
    ClientState cs = orch.state().clients[ev.user];
    Matrix short_before = cs.prompt.p_short;
    orch.online_inference(ev.user, ev, cs, orch.state().library, false);
    CHECK((cs.prompt.p_short - short_before).norm() == 0.0);
  }

  SECTION("feedback applies exactly one short update") {
    RunParams p2 = p;
    p2.orch.feedback_prob = 1.0;
    Orchestrator orch(world, p2);
    const Event& ev = world.slices[0].events[0];
    ClientState cs = orch.state().clients[ev.user];
    ClientState manual = cs;

    std::vector<Candidate> cands =
        orch.online_inference(ev.user, ev, cs, orch.state().library, true, 99);

    // Oracle: compose and short-update through the primitives.
    Vector q = Vector::Zero(p.world.d);
    for (int id : ev.history) q += world.item_embeddings.row(id).transpose();
    if (!ev.history.empty()) q /= double(ev.history.size());
    Vector h = orch.query_encoder().encode_vector(q);
    RoutingResult routing = route(h, orch.state().library.encoded,
                                  p.routing.top_m, p.routing.tau);
    std::vector<std::pair<double, const Matrix*>> retrieved;
    for (std::size_t i = 0; i < routing.indices.size(); ++i)
      retrieved.push_back({routing.weights[i],
                           &orch.state().library.prototypes[routing.indices[i]]});
    double alpha = session_alpha(manual.prompt);
    Matrix composed = compose_prompt(manual.prompt, alpha, retrieved);
    std::vector<std::pair<double, int>> sl;
    for (const Candidate& c : cands) sl.push_back({c.score, c.label});
    LossResult lr = bce_loss(sl);
    Matrix grad = orch.scorer().prompt_loss_gradient(ev.history, composed,
                                                     cands, lr.grad);
    short_update(manual.prompt, (alpha * grad).eval(), p2.stability);

    CHECK((cs.prompt.p_short - manual.prompt.p_short).norm() == 0.0);
    CHECK((cs.prompt.p_long - manual.prompt.p_long).norm() == 0.0);
  }
}

TEST_CASE("full run: invariants, determinism, exposure conservation") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  Orchestrator a(world, p);
  RunResult ra = a.run();
  Orchestrator b(world, p);
  RunResult rb = b.run();

  SECTION("bit-identical reports under the same seed") {
    CHECK(ra.report.ndcg10_mean == rb.report.ndcg10_mean);
    CHECK(ra.report.af == rb.report.af);
    CHECK(ra.report.fwt == rb.report.fwt);
    CHECK(ra.report.disparity_item == rb.report.disparity_item);
    CHECK(ra.report.upload_count == rb.report.upload_count);
  }

  SECTION("library invariants after the run") {
    const PrototypeLibrary& lib = ra.state.library;
    CHECK(lib.size() == p.server.prototypes);
    CHECK(lib.separation_feasible);
    CHECK(lib.min_pairwise_distance() >= p.server.rho_sep - 1e-9);
    Orchestrator probe(world, p);
    for (int k = 0; k < lib.size(); ++k)
      CHECK((probe.phi().encode_prompt(lib.prototypes[k]) - lib.encoded[k])
                .norm() < 1e-9);
  }

  SECTION("accountant matches the upload count") {
    CHECK(ra.state.accountant.total_releases == ra.report.upload_count);
  }

  SECTION("exposure conservation over recorded queries") {
    long total = 0;
    for (const QueryRecord& q : a.query_records())
      total += long(q.top_items.size());
    long budget = 0;
    for (const QueryRecord& q : a.query_records())
      budget += std::min<long>(10, p.world.candidates);
    CHECK(total == budget);
  }

  SECTION("accuracy matrix is fully populated") {
    CHECK(ra.accuracy.complete());
    for (int s = 0; s < ra.accuracy.T; ++s)
      for (int t = s; t < ra.accuracy.T; ++t) {
        CHECK(ra.accuracy.at(s, t) >= 0.0);
        CHECK(ra.accuracy.at(s, t) <= 1.0);
      }
  }
}

TEST_CASE("ablation switches have the advertised effect") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  SECTION("no_short keeps the session prompt at zero") {
    RunParams q = p;
    q.orch.ablation.no_short = true;
    Orchestrator orch(world, q);
    RunResult r = orch.run();
    for (const ClientState& cs : r.state.clients)
      CHECK(cs.prompt.p_short.norm() == 0.0);
  }

  SECTION("no_long keeps the long prompt at zero") {
    RunParams q = p;
    q.orch.ablation.no_long = true;
    Orchestrator orch(world, q);
    RunResult r = orch.run();
    for (const ClientState& cs : r.state.clients)
      CHECK(cs.prompt.p_long.norm() == 0.0);
  }

  SECTION("static prototypes freeze the library and suppress uploads") {
    RunParams q = p;
    q.orch.ablation.static_prototypes = true;
    Orchestrator orch(world, q);
    std::vector<Vector> before = orch.state().library.encoded;
    RunResult r = orch.run();
    for (int k = 0; k < int(before.size()); ++k)
      CHECK((r.state.library.encoded[k] - before[k]).norm() == 0.0);
    CHECK(r.report.upload_count == 0);
  }
}

TEST_CASE("checkpoint resume reproduces the straight run exactly") {
  RunParams p = toy_params();
  World world = generate_world(p.world);

  Orchestrator straight(world, p);
  RunResult expect = straight.run();

  std::string path = "/tmp/protofed_ckpt_test.json";
  Orchestrator first(world, p);
  first.advance_slice();
  first.advance_slice();
  first.save_checkpoint(path);

  Orchestrator resumed(world, p);
  resumed.load_checkpoint(path);
  RunResult got = resumed.run();

  CHECK(got.report.ndcg10_mean == expect.report.ndcg10_mean);
  CHECK(got.report.af == expect.report.af);
  CHECK(got.report.bwt == expect.report.bwt);
  CHECK(got.report.fwt == expect.report.fwt);
  CHECK(got.report.upload_count == expect.report.upload_count);
  CHECK(got.report.mean_steps_to_95 == expect.report.mean_steps_to_95);
  for (int k = 0; k < got.state.library.size(); ++k)
    CHECK((got.state.library.encoded[k] - expect.state.library.encoded[k])
              .norm() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("wasserstein alignment mode runs and stays finite") {
  RunParams p = toy_params();
  p.alignment.mode = AlignmentMode::wasserstein;
  p.alignment.sinkhorn.epsilon = 0.1;
  p.alignment.history_atoms = 4;
  World world = generate_world(p.world);
  Orchestrator orch(world, p);
  RunResult r = orch.run();
  CHECK(std::isfinite(r.report.ndcg10_mean));
  for (const ClientState& cs : r.state.clients)
    CHECK(cs.prompt.p_long.allFinite());
}
