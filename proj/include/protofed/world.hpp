#pragma once

#include "protofed/backbone.hpp"
#include "protofed/rng.hpp"
#include "protofed/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace protofed {

struct DriftKnobs {
  double walk_sigma = 0.02;     // per-slice Gaussian random walk
  double shock_prob = 0.05;     // chance of a sudden jump per slice
  double shock_magnitude = 0.5;
  double init_sigma = 0.1;      // spread of users around their cluster center

  void validate() const {
    require_arg(walk_sigma >= 0.0 && shock_magnitude >= 0.0 && init_sigma >= 0.0,
                "drift: magnitudes must be nonnegative");
    require_arg(shock_prob >= 0.0 && shock_prob <= 1.0, "drift: shock_prob in [0,1]");
  }
};

struct WorldConfig {
  int n_users = 1000;
  int n_items = 500;
  int n_true_clusters = 4;
  int n_slices = 8;             // T
  DriftKnobs drift;
  int interactions_per_user_per_slice = 6;
  int d = 256;                  // embedding width shared with the backbone
  int candidates = 100;         // 1 positive + (candidates-1) sampled negatives
  int history_cap = 12;         // most recent positives fed to the scorer
  double softmax_sharpness = 12.0;  // concentration of the preference softmax
  double cold_item_frac = 0.2;  // items first appearing after slice 1
  double cold_user_frac = 0.1;  // users first appearing in the last 2 slices
  std::uint64_t seed = 1;

  void validate() const {
    require_arg(n_users >= 1 && n_items >= 2 && n_true_clusters >= 1,
                "world: sizes must be positive");
    require_arg(n_slices >= 2, "world: need at least two slices");
    require_arg(interactions_per_user_per_slice >= 1, "world: interactions >= 1");
    require_arg(candidates >= 2 && candidates <= n_items,
                "world: candidate count must fit the item set");
    require_arg(cold_item_frac >= 0.0 && cold_item_frac < 1.0 &&
                    cold_user_frac >= 0.0 && cold_user_frac < 1.0,
                "world: cold fractions in [0,1)");
    drift.validate();
  }
};

enum class DriftLevel { low, mid, high };
enum class ActivityLevel { light, medium, heavy };

struct UserTruth {
  std::vector<Vector> preference;  // one vector per slice
  int cluster_id = 0;
  int join_slice = 0;              // first slice with interactions
  double realized_drift = 0.0;     // sum of slice-to-slice preference jumps
  long interactions = 0;
  DriftLevel drift_level = DriftLevel::low;
  ActivityLevel activity = ActivityLevel::light;
  bool cold_start = false;
};

struct Event {
  int user = -1;
  std::vector<int> history;      // recent positives before this event
  std::vector<int> candidates;   // item ids, exactly one positive
  int positive_pos = 0;          // index into candidates
};

struct InteractionSlice {
  int slice_index = 0;
  std::vector<Event> events;
};

struct World {
  WorldConfig config;
  Matrix item_embeddings;          // n_items x d, unit rows
  std::vector<int> item_first_slice;
  Matrix cluster_centers;          // n_true_clusters x d
  std::vector<UserTruth> users;
  std::vector<InteractionSlice> slices;
};

namespace detail {

inline int sample_softmax(const std::vector<double>& logits, RngStream& rng) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(logits[i] - mx);
    total += w[i];
  }
  double r = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    acc += w[i];
    if (r <= acc) return int(i);
  }
  return int(logits.size()) - 1;
}

}  // namespace detail

// Draws one positive item for a preference vector by softmax over the
// eligible items' inner products.
inline int draw_positive(const Vector& preference, const Matrix& items,
                         const std::vector<int>& eligible, double sharpness,
                         RngStream& rng) {
  require_arg(!eligible.empty(), "draw_positive: no eligible items");
  std::vector<double> logits(eligible.size());
  for (std::size_t i = 0; i < eligible.size(); ++i)
    logits[i] = sharpness * preference.dot(items.row(eligible[i]).transpose());
  return eligible[detail::sample_softmax(logits, rng)];
}

inline void stratify(std::vector<UserTruth>& users, int n_slices);

// Generates the full drifting-user world: cluster-structured preferences,
// slice-partitioned event streams with one positive and uniformly sampled
// negatives per event, and per-user ground-truth labels. Deterministic in
// the seed.
inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;

  RngStream item_rng = RngStream::derive(cfg.seed, "world_items");
  w.item_embeddings = Matrix(cfg.n_items, cfg.d);
  for (int i = 0; i < cfg.n_items; ++i)
    w.item_embeddings.row(i) = item_rng.unit_vector(cfg.d).transpose();

  // Item introduction schedule: a fraction arrives after slice 1.
  w.item_first_slice.assign(cfg.n_items, 0);
  int n_cold_items = int(cfg.cold_item_frac * cfg.n_items);
  {
    RngStream rng = RngStream::derive(cfg.seed, "world_item_schedule");
    std::vector<int> ids(cfg.n_items);
    std::iota(ids.begin(), ids.end(), 0);
    rng.shuffle(ids);
    for (int c = 0; c < n_cold_items; ++c)
      w.item_first_slice[ids[c]] = 1 + int(rng.uniform_index(cfg.n_slices - 1));
  }

  RngStream center_rng = RngStream::derive(cfg.seed, "world_centers");
  w.cluster_centers = Matrix(cfg.n_true_clusters, cfg.d);
  for (int k = 0; k < cfg.n_true_clusters; ++k)
    w.cluster_centers.row(k) = center_rng.unit_vector(cfg.d).transpose();

  // Users: cluster assignment, join slice, per-user activity rate.
  w.users.resize(cfg.n_users);
  int n_cold_users = int(cfg.cold_user_frac * cfg.n_users);
  {
    RngStream rng = RngStream::derive(cfg.seed, "world_users");
    std::vector<int> ids(cfg.n_users);
    std::iota(ids.begin(), ids.end(), 0);
    rng.shuffle(ids);
    for (int u = 0; u < cfg.n_users; ++u) {
      UserTruth& t = w.users[u];
      t.cluster_id = int(rng.uniform_index(cfg.n_true_clusters));
      t.join_slice = 0;
    }
    for (int c = 0; c < n_cold_users && cfg.n_slices >= 2; ++c)
      w.users[ids[c]].join_slice = cfg.n_slices - 2 + int(rng.uniform_index(2));
  }

  // Preference trajectories: start at the cluster center plus noise, evolve
  // by a Gaussian walk with occasional shocks.
  for (int u = 0; u < cfg.n_users; ++u) {
    UserTruth& t = w.users[u];
    RngStream rng = RngStream::derive(cfg.seed, "world_pref", u);
    Vector pref = w.cluster_centers.row(t.cluster_id).transpose() +
                  rng.gaussian_vector(cfg.d, cfg.drift.init_sigma);
    t.preference.resize(cfg.n_slices);
    for (int s = 0; s < cfg.n_slices; ++s) {
      if (s > 0) {
        Vector prev = pref;
        if (cfg.drift.walk_sigma > 0.0)
          pref += rng.gaussian_vector(cfg.d, cfg.drift.walk_sigma);
        if (cfg.drift.shock_prob > 0.0 && rng.bernoulli(cfg.drift.shock_prob))
          pref += cfg.drift.shock_magnitude * rng.unit_vector(cfg.d);
        t.realized_drift += (pref - prev).norm();
      }
      t.preference[s] = pref;
    }
  }

  // Events per slice: history snapshots, softmax positives over available
  // items, uniform negatives from items the user has not hit this slice.
  std::vector<std::vector<int>> user_history(cfg.n_users);
  for (int s = 0; s < cfg.n_slices; ++s) {
    InteractionSlice slice;
    slice.slice_index = s;
    std::vector<int> available;
    for (int i = 0; i < cfg.n_items; ++i)
      if (w.item_first_slice[i] <= s) available.push_back(i);
    require_state(int(available.size()) >= cfg.candidates,
                  "generate_world: candidate set larger than available items");

    for (int u = 0; u < cfg.n_users; ++u) {
      UserTruth& t = w.users[u];
      if (t.join_slice > s) continue;
      RngStream rng = RngStream::derive(cfg.seed, "world_events", u, s);
      double rate = 0.5 + rng.uniform();  // heterogeneous activity
      int n_events = std::max(
          1, int(std::round(rate * cfg.interactions_per_user_per_slice)));
      std::vector<int> slice_positives;
      for (int e = 0; e < n_events; ++e) {
        Event ev;
        ev.user = u;
        ev.history = user_history[u];
        int pos = draw_positive(t.preference[s], w.item_embeddings, available,
                                cfg.softmax_sharpness, rng);
        std::vector<bool> used(cfg.n_items, false);
        used[pos] = true;
        for (int sp : slice_positives) used[sp] = true;
        std::vector<int> pool;
        for (int a : available)
          if (!used[a]) pool.push_back(a);
        require_state(int(pool.size()) >= cfg.candidates - 1,
                      "generate_world: not enough negatives to sample");
        std::vector<int> cands;
        cands.reserve(cfg.candidates);
        cands.push_back(pos);
        for (int pick = 0; pick < cfg.candidates - 1; ++pick) {
          std::size_t j = pick + rng.uniform_index(pool.size() - pick);
          std::swap(pool[pick], pool[j]);
          cands.push_back(pool[pick]);
        }
        // Positive position is seeded, not always first.
        int pp = int(rng.uniform_index(cands.size()));
        std::swap(cands[0], cands[pp]);
        ev.candidates = cands;
        for (int i = 0; i < int(cands.size()); ++i)
          if (cands[i] == pos) ev.positive_pos = i;
        slice.events.push_back(ev);

        slice_positives.push_back(pos);
        user_history[u].push_back(pos);
        if (int(user_history[u].size()) > cfg.history_cap)
          user_history[u].erase(user_history[u].begin());
        t.interactions++;
      }
    }
    w.slices.push_back(std::move(slice));
  }
  stratify(w.users, cfg.n_slices);
  return w;
}

// Tercile split along realized drift and activity; ties go to the lower
// stratum. Cold start means joining in the final two slices.
inline void stratify(std::vector<UserTruth>& users, int n_slices) {
  const int n = int(users.size());
  if (n == 0) return;
  auto terciles = [&](auto key) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return key(a) < key(b); });
    std::vector<int> level(n, 0);
    for (int r = 0; r < n; ++r) {
      int lvl = std::min(2, 3 * r / std::max(n, 1));
      level[order[r]] = lvl;
    }
    // Equal keys share the lowest level among their run.
    for (int r = 1; r < n; ++r) {
      if (key(order[r]) == key(order[r - 1]))
        level[order[r]] = level[order[r - 1]];
    }
    return level;
  };

  auto drift_levels = terciles([&](int u) { return users[u].realized_drift; });
  auto act_levels = terciles([&](int u) { return double(users[u].interactions); });
  for (int u = 0; u < n; ++u) {
    users[u].drift_level = DriftLevel(drift_levels[u]);
    users[u].activity = ActivityLevel(act_levels[u]);
    users[u].cold_start = users[u].join_slice >= n_slices - 2 &&
                          users[u].join_slice > 0;
  }
}

// ---------------------------------------------------------------------------
// Line-JSON serialization (versioned, seed recorded in the header line)
// ---------------------------------------------------------------------------

inline constexpr int kWorldFormatVersion = 1;

namespace detail {

inline nlohmann::json vec_to_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector vec_from_json(const nlohmann::json& a) {
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[int(i)] = a[i].get<double>();
  return v;
}

}  // namespace detail

inline void save_world(const World& w, const std::string& path) {
  std::ofstream out(path);
  require_state(bool(out), "save_world: cannot open " + path);
  nlohmann::json header = {
      {"format", "protofed-world"},
      {"version", kWorldFormatVersion},
      {"seed", w.config.seed},
      {"n_users", w.config.n_users},
      {"n_items", w.config.n_items},
      {"n_true_clusters", w.config.n_true_clusters},
      {"n_slices", w.config.n_slices},
      {"d", w.config.d},
      {"candidates", w.config.candidates},
      {"history_cap", w.config.history_cap},
  };
  out << header.dump() << "\n";
  for (int i = 0; i < w.item_embeddings.rows(); ++i) {
    nlohmann::json rec = {{"t", "item"},
                          {"id", i},
                          {"first_slice", w.item_first_slice[i]},
                          {"e", detail::vec_to_json(w.item_embeddings.row(i))}};
    out << rec.dump() << "\n";
  }
  for (int k = 0; k < w.cluster_centers.rows(); ++k) {
    nlohmann::json rec = {{"t", "center"},
                          {"id", k},
                          {"e", detail::vec_to_json(w.cluster_centers.row(k))}};
    out << rec.dump() << "\n";
  }
  for (int u = 0; u < int(w.users.size()); ++u) {
    const UserTruth& t = w.users[u];
    nlohmann::json prefs = nlohmann::json::array();
    for (const Vector& p : t.preference) prefs.push_back(detail::vec_to_json(p));
    nlohmann::json rec = {{"t", "user"},
                          {"id", u},
                          {"cluster", t.cluster_id},
                          {"join_slice", t.join_slice},
                          {"realized_drift", t.realized_drift},
                          {"interactions", t.interactions},
                          {"prefs", prefs}};
    out << rec.dump() << "\n";
  }
  for (const InteractionSlice& slice : w.slices) {
    for (const Event& e : slice.events) {
      nlohmann::json rec = {{"t", "event"},
                            {"slice", slice.slice_index},
                            {"user", e.user},
                            {"hist", e.history},
                            {"cands", e.candidates},
                            {"pos", e.positive_pos}};
      out << rec.dump() << "\n";
    }
  }
}

inline World load_world(const std::string& path) {
  std::ifstream in(path);
  require_state(bool(in), "load_world: cannot open " + path);
  std::string line;
  require_state(bool(std::getline(in, line)), "load_world: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  require_state(header.value("format", "") == "protofed-world",
                "load_world: not a world file");
  require_state(header.value("version", -1) == kWorldFormatVersion,
                "load_world: unsupported version");

  World w;
  w.config.seed = header["seed"].get<std::uint64_t>();
  w.config.n_users = header["n_users"].get<int>();
  w.config.n_items = header["n_items"].get<int>();
  w.config.n_true_clusters = header["n_true_clusters"].get<int>();
  w.config.n_slices = header["n_slices"].get<int>();
  w.config.d = header["d"].get<int>();
  w.config.candidates = header["candidates"].get<int>();
  w.config.history_cap = header["history_cap"].get<int>();

  w.item_embeddings = Matrix(w.config.n_items, w.config.d);
  w.item_first_slice.assign(w.config.n_items, 0);
  w.cluster_centers = Matrix(w.config.n_true_clusters, w.config.d);
  w.users.resize(w.config.n_users);
  w.slices.resize(w.config.n_slices);
  for (int s = 0; s < w.config.n_slices; ++s) w.slices[s].slice_index = s;

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    std::string t = rec["t"].get<std::string>();
    if (t == "item") {
      int id = rec["id"].get<int>();
      w.item_first_slice[id] = rec["first_slice"].get<int>();
      w.item_embeddings.row(id) = detail::vec_from_json(rec["e"]).transpose();
    } else if (t == "center") {
      w.cluster_centers.row(rec["id"].get<int>()) =
          detail::vec_from_json(rec["e"]).transpose();
    } else if (t == "user") {
      UserTruth& u = w.users[rec["id"].get<int>()];
      u.cluster_id = rec["cluster"].get<int>();
      u.join_slice = rec["join_slice"].get<int>();
      u.realized_drift = rec["realized_drift"].get<double>();
      u.interactions = rec["interactions"].get<long>();
      for (const auto& p : rec["prefs"])
        u.preference.push_back(detail::vec_from_json(p));
    } else if (t == "event") {
      Event e;
      e.user = rec["user"].get<int>();
      e.history = rec["hist"].get<std::vector<int>>();
      e.candidates = rec["cands"].get<std::vector<int>>();
      e.positive_pos = rec["pos"].get<int>();
      w.slices[rec["slice"].get<int>()].events.push_back(std::move(e));
    }
  }
  stratify(w.users, w.config.n_slices);
  return w;
}

}  // namespace protofed
