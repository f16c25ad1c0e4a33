#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "safelayer/constraints.hpp"
#include "safelayer/env.hpp"
#include "safelayer/errors.hpp"
#include "safelayer/policy.hpp"
#include "safelayer/safe_rl.hpp"
#include "safelayer/trpo.hpp"
#include "support/projection_oracle.hpp"

using namespace safelayer;
using namespace safelayer::safe_rl;
using constraints::Assembled;
using constraints::BlockKind;
using constraints::ConstraintBlock;
using constraints::ConstraintSet;

namespace {

constexpr double kPi = std::numbers::pi;

ConstraintBlock constant_block(MatrixXd G, VectorXd h, bool equality = false) {
  ConstraintBlock b;
  b.kind = BlockKind::kConstant;
  b.label = equality ? "eq" : "in";
  b.rows = G.rows();
  b.equality = equality;
  b.G = std::move(G);
  b.h = std::move(h);
  return b;
}

OptLayer default_layer(LayerOptions opts = {}) { return reacher_layer({}, 0.01, opts); }

// Independent cost: explicitly row-normalised matrices, zero rows kept as is.
double oracle_cost(const Assembled& c, const VectorXd& a) {
  MatrixXd G = c.G;
  VectorXd h = c.h;
  for (Eigen::Index i = 0; i < G.rows(); ++i) {
    const double n = G.row(i).norm();
    if (n > 0.0) {
      G.row(i) /= n;
      h[i] /= n;
    }
  }
  MatrixXd A = c.A;
  VectorXd b = c.b;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const double n = A.row(i).norm();
    if (n > 0.0) {
      A.row(i) /= n;
      b[i] /= n;
    }
  }
  const double in = (G * a - h).cwiseMax(0.0).norm();
  const double eq = A.rows() ? (A * a - b).norm() : 0.0;
  return eq + in;
}

VectorXd random_state(std::mt19937_64& rng, env::Reacher2D& e) {
  std::uniform_real_distribution<double> ang(-kPi, kPi), vel(-2 * kPi, 2 * kPi),
      pos(-0.27, 0.27);
  e.set_state({ang(rng), ang(rng)}, {vel(rng), vel(rng)}, {pos(rng), pos(rng)},
              {pos(rng), pos(rng)});
  // Keep starts outside contact, as resets do.
  const auto d = e.distances();
  if (*std::min_element(d.begin(), d.end()) <= 0.0) return random_state(rng, e);
  return e.observation();
}

policy::GaussianPolicy reacher_policy(std::uint64_t seed, double log_std) {
  policy::PolicyConfig cfg;
  cfg.obs_dim = env::Layout::kSize;
  cfg.log_std_init = log_std;
  policy::GaussianPolicy p(cfg);
  std::mt19937_64 rng(seed);
  p.init(rng);
  return p;
}

struct Call {
  trpo::Batch batch;
};

// Records every batch it is handed; never changes the policy.
class CountingUpdater : public trpo::PolicyUpdater {
 public:
  trpo::UpdateStats update(policy::GaussianPolicy&, const trpo::Batch& batch) override {
    calls.push_back({batch});
    return {};
  }
  std::vector<Call> calls;
};

}  // namespace

TEST_CASE("violation cost and projection on hand-sized problems") {
  SUBCASE("scaled inequality") {
    OptLayer layer(ConstraintSet(1, 1, {constant_block(MatrixXd::Constant(1, 1, 2.0),
                                                       VectorXd::Constant(1, 2.0))}));
    const auto out = layer.apply(VectorXd::Zero(1), VectorXd::Constant(1, 3.0));
    CHECK(out.action[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(out.cost == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(out.predicted_violation == doctest::Approx(4.0));
  }
  SUBCASE("equality row") {
    OptLayer layer(ConstraintSet(
        2, 1,
        {constant_block(MatrixXd::Identity(2, 2), VectorXd::Constant(2, 10.0)),
         constant_block(Eigen::RowVector2d(1.0, 0.0), VectorXd::Zero(1), true)}));
    const auto out = layer.apply(VectorXd::Zero(1), Eigen::Vector2d(0.3, 0.0));
    CHECK(out.cost == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(out.action.norm() < 1e-8);
  }
  SUBCASE("feasible prediction") {
    OptLayer layer(ConstraintSet(1, 1, {constant_block(MatrixXd::Constant(1, 1, 2.0),
                                                       VectorXd::Constant(1, 2.0))}));
    const auto out = layer.apply(VectorXd::Zero(1), VectorXd::Constant(1, 0.25));
    CHECK(out.cost == 0.0);
    CHECK(std::abs(out.action[0] - 0.25) < 1e-6);
  }
  SUBCASE("zero rows count their right-hand side") {
    Assembled c;
    c.G = MatrixXd::Zero(2, 2);
    c.h = Eigen::Vector2d(-0.5, 0.25);
    c.A = MatrixXd::Zero(1, 2);
    c.b = VectorXd::Constant(1, -0.125);
    CHECK(violation_cost(c, Eigen::Vector2d(3.0, -1.0)) == 0.625);
    c.h[0] = 0.0;
    c.b[0] = 0.0;
    CHECK(violation_cost(c, Eigen::Vector2d(3.0, -1.0)) == 0.0);
  }
  SUBCASE("null step infeasible") {
    OptLayer layer(ConstraintSet(1, 1, {constant_block(MatrixXd::Constant(1, 1, 1.0),
                                                       VectorXd::Constant(1, -1.0))}));
    CHECK_THROWS_AS(layer.apply(VectorXd::Zero(1), VectorXd::Zero(1)), InfeasibleQp);
  }
}

TEST_CASE("projection on reacher states") {
  const OptLayer layer = default_layer();
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  int feasible = 0, projected = 0;
  for (int t = 0; t < 2000; ++t) {
    const VectorXd s = random_state(rng, e);
    const double scale = t % 2 ? 0.01 : 0.2;
    const VectorXd a = Eigen::Vector2d(scale * n01(rng), scale * n01(rng));
    const auto out = layer.apply(s, a);
    const Assembled c = layer.assemble(s);
    const Assembled enforced = out.relaxed ? constraints::relaxed(c) : c;
    CHECK(max_violation(enforced, out.action) <= 1e-9);
    CHECK(std::abs(out.cost - oracle_cost(c, a)) <= 1e-10);
    if (((c.G * a - c.h).array() <= 0.0).all()) {
      ++feasible;
      CHECK(out.cost == 0.0);
      CHECK((out.action - a).norm() <= 1e-6);
    } else {
      ++projected;
      if (constraints::null_step_violation(c) == 0.0) CHECK(out.cost > 0.0);
      CHECK((out.action - a).norm() > 0.0);
    }
  }
  CHECK(feasible > 200);
  CHECK(projected > 200);
}

TEST_CASE("batched layer matches single applications") {
  const OptLayer layer = default_layer();
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n01;
  std::vector<VectorXd> states, preds;
  for (int i = 0; i < 64; ++i) {
    states.push_back(random_state(rng, e));
    preds.push_back(Eigen::Vector2d(0.1 * n01(rng), 0.1 * n01(rng)));
  }
  const auto batch = layer.apply_batch(states, preds);
  for (int i = 0; i < 64; ++i) {
    const auto single = layer.apply(states[i], preds[i]);
    CHECK((batch[i].action - single.action).norm() <= 1e-10);
    CHECK(batch[i].cost == single.cost);
  }
}

TEST_CASE("a failing instance does not disturb the rest of a batch") {
  const OptLayer layer = default_layer();
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(21);
  std::vector<VectorXd> states, preds;
  for (int i = 0; i < 8; ++i) {
    states.push_back(random_state(rng, e));
    preds.push_back(Eigen::Vector2d(0.05 * i - 0.2, 0.1));
  }
  preds[3][0] = std::nan("");
  const auto batch = layer.apply_batch(states, preds);
  for (int i = 0; i < 8; ++i) {
    CAPTURE(i);
    if (i == 3) {
      CHECK(batch[i].action.isZero(0.0));
      CHECK(batch[i].fallback == 2);
      continue;
    }
    const auto single = layer.apply(states[i], preds[i]);
    CHECK((batch[i].action - single.action).norm() <= 1e-10);
  }
}

TEST_CASE("inside d_m the layer pushes back whenever it can") {
  const OptLayer layer = default_layer();
  const double d_m = constraints::ReacherLimits{}.d_m;
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> ang(-kPi, kPi), vel(-0.5, 0.5), pos(-0.27, 0.27);
  std::normal_distribution<double> n01;
  int recovered = 0, relaxed = 0;
  for (int t = 0; recovered + relaxed < 150 && t < 400000; ++t) {
    e.set_state({ang(rng), ang(rng)}, {vel(rng), vel(rng)}, {pos(rng), pos(rng)},
                {pos(rng), pos(rng)});
    const auto d = e.distances();
    const double closest = *std::min_element(d.begin(), d.end());
    if (closest <= 0.0 || closest >= d_m) continue;
    const VectorXd s = e.observation();
    const Assembled c = layer.assemble(s);
    REQUIRE(constraints::null_step_violation(c) > 0.0);
    const VectorXd a = Eigen::Vector2d(0.05 * n01(rng), 0.05 * n01(rng));
    const auto out = layer.apply(s, a);
    const auto exact = testing::oracle_projection(c, a);
    if (exact) {
      ++recovered;
      CHECK_FALSE(out.relaxed);
      CHECK(max_violation(c, out.action) <= 1e-9);
      CHECK((out.action - exact->x).norm() <= 1e-6);
    } else {
      ++relaxed;
      CHECK(out.relaxed);
      CHECK(max_violation(constraints::relaxed(c), out.action) <= 1e-9);
    }
  }
  CHECK(recovered > 20);
}

TEST_CASE("fallback keeps truncated solves feasible") {
  LayerOptions opts;
  opts.k_max = 1;
  opts.resolve_iterations = 1;
  const OptLayer layer = default_layer(opts);
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n01;
  int scaled = 0;
  for (int t = 0; t < 300; ++t) {
    const VectorXd s = random_state(rng, e);
    const auto out = layer.apply(s, Eigen::Vector2d(0.3 * n01(rng), 0.3 * n01(rng)));
    const Assembled c = layer.assemble(s);
    CHECK(max_violation(out.relaxed ? constraints::relaxed(c) : c, out.action) <= opts.safety_tol);
    scaled += out.fallback == 2;
  }
  CHECK(scaled > 0);
}

TEST_CASE("build_traj") {
  const OptLayer layer = default_layer();
  env::Reacher2D e(env::EnvConfig{});
  // Wide exploration so that most raw predictions break the limits.
  const auto policy = reacher_policy(14, 0.0);
  std::mt19937_64 rng(15);

  SUBCASE("constrained execution is safe") {
    int steps = 0;
    for (int k = 0; k < 20; ++k) {
      const Episode ep = build_traj(e, policy, layer, true, rng);
      CHECK_FALSE(ep.collision());
      CHECK(ep.limit_violations() == 0);
      CHECK(ep.records.back().truncated);
      steps += static_cast<int>(ep.records.size());
      for (const auto& r : ep.records) {
        if (r.cost == 0.0) CHECK((r.predicted - r.corrected).norm() <= 1e-6);
        else CHECK((r.predicted - r.corrected).norm() > 0.0);
      }
    }
    CHECK(steps == 20 * 200);
  }
  SUBCASE("unconstrained execution is not") {
    int bad = 0;
    for (int k = 0; k < 20; ++k) {
      const Episode ep = build_traj(e, policy, layer, false, rng);
      bad += ep.collision() || ep.limit_violations() > 0;
    }
    CHECK(bad > 0);
  }
}

TEST_CASE("rollout pool") {
  const OptLayer layer = default_layer();
  const auto policy = reacher_policy(16, -1.0);
  env::EnvConfig cfg;

  SUBCASE("quota and episode boundaries") {
    RolloutPool pool(cfg, layer, 3, 7);
    const auto eps = pool.collect(policy, true, 1000);
    int steps = 0;
    for (const auto& ep : eps) {
      steps += static_cast<int>(ep.records.size());
      CHECK((ep.records.back().terminated || ep.records.back().truncated));
      for (std::size_t i = 0; i + 1 < ep.records.size(); ++i)
        CHECK_FALSE((ep.records[i].terminated || ep.records[i].truncated));
    }
    CHECK(steps >= 1000);
  }
  SUBCASE("deterministic given seed and worker count") {
    RolloutPool a(cfg, layer, 4, 9), b(cfg, layer, 4, 9);
    for (int round = 0; round < 2; ++round) {
      const auto ea = a.collect(policy, true, 900), eb = b.collect(policy, true, 900);
      REQUIRE(ea.size() == eb.size());
      for (std::size_t k = 0; k < ea.size(); ++k) {
        REQUIRE(ea[k].records.size() == eb[k].records.size());
        for (std::size_t i = 0; i < ea[k].records.size(); ++i) {
          CHECK(ea[k].records[i].obs == eb[k].records[i].obs);
          CHECK(ea[k].records[i].corrected == eb[k].records[i].corrected);
        }
      }
    }
  }
  SUBCASE("single worker replays build_traj") {
    RolloutPool pool(cfg, layer, 1, 21);
    const auto eps = pool.collect(policy, true, 1);
    REQUIRE(eps.size() == 1);
    std::seed_seq seq{21u, 0u, 0u};
    std::mt19937_64 rng(seq);
    env::Reacher2D e(cfg);
    const Episode ref = build_traj(e, policy, layer, true, rng);
    REQUIRE(ref.records.size() == eps[0].records.size());
    for (std::size_t i = 0; i < ref.records.size(); ++i)
      CHECK((ref.records[i].obs - eps[0].records[i].obs).norm() <= 1e-9);
    CHECK(ref.bootstrap_value == doctest::Approx(eps[0].bootstrap_value));
  }
}

TEST_CASE("strategy names") {
  for (Strategy s : kAllStrategies) CHECK(parse_strategy(strategy_name(s)) == s);
  CHECK(parse_strategy("CPC") == Strategy::kCpc);
  CHECK_THROWS_AS(parse_strategy("ppo"), ConfigError);
  CHECK_FALSE(executes_corrections(Strategy::kUp));
  CHECK(executes_corrections(Strategy::kCc));
}

TEST_CASE("run_strategy feeds the updater per strategy") {
  const OptLayer layer = default_layer();
  env::EnvConfig cfg;
  TrainConfig tc;
  tc.episodes = 25;
  tc.steps_per_round = 1000;
  tc.workers = 2;
  tc.seed = 5;

  auto run = [&](Strategy s, CountingUpdater& u) {
    tc.strategy = s;
    auto p = reacher_policy(30, -0.5);
    return run_strategy(tc, cfg, layer, p, u);
  };

  CountingUpdater up, cp, cc, cpc;
  const auto log_up = run(Strategy::kUp, up);
  const auto log_cp = run(Strategy::kCp, cp);
  const auto log_cc = run(Strategy::kCc, cc);
  const auto log_cpc = run(Strategy::kCpc, cpc);

  for (const auto* log : {&log_up, &log_cp, &log_cc, &log_cpc}) {
    CHECK(log->episodes.size() == 25);
    int cum = 0;
    for (std::size_t i = 0; i < log->episodes.size(); ++i) {
      CHECK(log->episodes[i].episode == static_cast<int>(i));
      cum += log->episodes[i].collision;
      CHECK(log->episodes[i].cum_collisions == cum);
    }
  }
  CHECK(cpc.calls.size() == 2 * cp.calls.size());
  CHECK(cc.calls.size() == cp.calls.size());
  CHECK(up.calls.size() >= 1);
  CHECK(log_cpc.updates.size() == cpc.calls.size());

  // CP and CC see the same rollouts and differ only in the action field.
  for (std::size_t k = 0; k < cp.calls.size(); ++k) {
    const auto &a = cp.calls[k].batch, &b = cc.calls[k].batch;
    CHECK(a.obs == b.obs);
    CHECK(a.rewards == b.rewards);
    CHECK(a.values == b.values);
    CHECK(a.actions != b.actions);
  }
  // CPC: raw predictions with r - c, then corrections with r; same values.
  for (std::size_t k = 0; k < cp.calls.size(); ++k) {
    const auto &first = cpc.calls[2 * k].batch, &second = cpc.calls[2 * k + 1].batch;
    CHECK(first.actions == cp.calls[k].batch.actions);
    CHECK(second.actions == cc.calls[k].batch.actions);
    CHECK(second.rewards == cp.calls[k].batch.rewards);
    CHECK(first.values == second.values);
    CHECK((first.rewards.array() <= second.rewards.array()).all());
    CHECK(first.rewards != second.rewards);
  }
  for (const auto& e : log_cp.episodes) {
    CHECK_FALSE(e.collision);
    CHECK(e.violations == 0);
  }
  tc.episodes = 0;
  CountingUpdater unused;
  CHECK_THROWS_AS(run(Strategy::kCp, unused), ConfigError);
}

TEST_CASE("make_batch marks truncation bootstraps") {
  Episode ep;
  for (int i = 0; i < 3; ++i) {
    TrajectoryRecord r;
    r.obs = VectorXd::Constant(2, i);
    r.predicted = VectorXd::Constant(2, 1.0);
    r.corrected = VectorXd::Constant(2, 0.5);
    r.reward = 1.0;
    r.cost = 0.25;
    r.value = 0.1 * i;
    ep.records.push_back(r);
  }
  ep.records.back().truncated = true;
  ep.bootstrap_value = 4.0;
  const std::vector<Episode> eps{ep};
  const auto b = make_batch(eps, true, true);
  CHECK(b.actions == MatrixXd::Constant(2, 3, 0.5));
  CHECK(b.rewards == VectorXd::Constant(3, 0.75));
  CHECK(b.bootstrap_value[2] == 4.0);
  CHECK(b.bootstrap_value.head(2).norm() == 0.0);
  CHECK(b.truncated[2]);
  CHECK_NOTHROW(b.validate());
}

TEST_CASE("action Jacobian matches differences of the exact projection") {
  const OptLayer layer = default_layer();
  env::Reacher2D e(env::EnvConfig{});
  std::mt19937_64 rng(16);
  std::normal_distribution<double> n01;
  int checked = 0, active = 0;
  while (checked < 40) {
    const VectorXd s = random_state(rng, e);
    const VectorXd a = Eigen::Vector2d(0.08 * n01(rng), 0.08 * n01(rng));
    const Assembled c = layer.assemble(s);
    const auto exact = testing::oracle_projection(c, a);
    REQUIRE(exact);
    if (!testing::strictly_complementary(c, *exact, 1e-5)) continue;
    const auto fd = testing::oracle_jacobian_fd(c, a, 1e-7);
    REQUIRE(fd);
    const MatrixXd J = layer.action_jacobian(s, a);
    CHECK((J - *fd).norm() <= 1e-4 * std::max(fd->norm(), 1.0));
    active += !exact->active.empty();
    ++checked;
  }
  CHECK(active > 5);
}
