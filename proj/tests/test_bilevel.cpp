#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "fedbicross/bilevel.hpp"
#include "scenario_helpers.hpp"

using namespace fedbicross;

namespace {

std::shared_ptr<const Model> random_member(const Architecture& arch, RandomStream& rng) {
  return std::make_shared<const Model>(Model::random_init(arch, rng));
}

std::vector<double> random_direction(std::size_t n, RandomStream& rng) {
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal();
  return d;
}

// Nearest simplex point by grid search; `steps` samples per axis.
std::vector<double> grid_projection_2d(const std::vector<double>& v, std::size_t steps) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> arg(2);
  for (std::size_t i = 0; i <= steps; ++i) {
    double a = static_cast<double>(i) / static_cast<double>(steps);
    double d = (a - v[0]) * (a - v[0]) + (1.0 - a - v[1]) * (1.0 - a - v[1]);
    if (d < best) {
      best = d;
      arg = {a, 1.0 - a};
    }
  }
  return arg;
}

double grid_best_distance_3d(const std::vector<double>& v, std::size_t steps) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i <= steps; ++i)
    for (std::size_t j = 0; i + j <= steps; ++j) {
      double a = static_cast<double>(i) / static_cast<double>(steps);
      double b = static_cast<double>(j) / static_cast<double>(steps);
      double c = 1.0 - a - b;
      double d = (a - v[0]) * (a - v[0]) + (b - v[1]) * (b - v[1]) +
                 (c - v[2]) * (c - v[2]);
      best = std::min(best, d);
    }
  return std::sqrt(best);
}

struct ToySetup {
  Architecture arch = make_mlp(2, {4}, 3);
  std::vector<EnsembleTeacher> originals;
  std::vector<NoiseAdaptedTeacher> adapteds;
  std::vector<Tensor> train_batches;
  std::vector<Tensor> val_batches;
  std::vector<const EnsembleTeacher*> orig_ptrs;
  std::vector<const EnsembleTeacher*> adapt_ptrs;
};

ToySetup make_toy_setup(std::size_t clusters, RandomStream& rng) {
  ToySetup s;
  for (std::size_t c = 0; c < clusters; ++c) {
    s.originals.push_back(build_ensemble({random_member(s.arch, rng)}, c));
    NoiseAdaptedTeacher nat;
    nat.teacher = build_ensemble({random_member(s.arch, rng)}, c);
    nat.momentum = 0.9;
    s.adapteds.push_back(std::move(nat));
    s.train_batches.push_back(Tensor::randn({8, 2}, rng));
    s.val_batches.push_back(Tensor::randn({4, 2}, rng));
  }
  for (std::size_t c = 0; c < clusters; ++c) {
    s.orig_ptrs.push_back(&s.originals[c]);
    s.adapt_ptrs.push_back(&s.adapteds[c].teacher);
  }
  return s;
}

}  // namespace

TEST_CASE("lambda schedule") {
  REQUIRE(lambda_schedule(10, 10) == 0.0);
  REQUIRE(lambda_schedule(5, 10) == Catch::Approx(0.5));
  REQUIRE(lambda_schedule(100, 500) == Catch::Approx(0.8));
  REQUIRE_THROWS_AS(lambda_schedule(0, 10), InputError);
  REQUIRE_THROWS_AS(lambda_schedule(11, 10), InputError);
}

TEST_CASE("kd loss endpoints and gradient") {
  RandomStream rng(1);
  Architecture arch = make_mlp(2, {5}, 3);
  Model student = Model::random_init(arch, rng);
  EnsembleTeacher original = build_ensemble({random_member(arch, rng)}, 0);
  EnsembleTeacher adapted = build_ensemble({random_member(arch, rng)}, 0);
  Tensor x = Tensor::randn({6, 2}, rng);
  const double tau = 20.0;

  SECTION("at t = T the adapted teacher drops out entirely") {
    LossValue lv = kd_loss(student, original, adapted, x, 10, 10, tau);
    auto tr = student.forward_traced(x, BnMode::BatchStats);
    double expect = kl_divergence(original.soft_logits(x), tr.logits(), tau).value;
    REQUIRE(lv.value == Catch::Approx(expect).epsilon(1e-12));
  }

  SECTION("identical teachers make the blend independent of t") {
    LossValue early = kd_loss(student, original, original, x, 1, 10, tau);
    LossValue late = kd_loss(student, original, original, x, 9, 10, tau);
    REQUIRE(early.value == Catch::Approx(late.value).epsilon(1e-12));
  }

  SECTION("student gradient matches finite differences") {
    for (std::size_t t : {1ul, 4ul, 10ul}) {
      auto f = [&](const std::vector<double>& p) {
        Model m = student;
        m.set_parameters(p);
        LossValue lv = kd_loss(m, original, adapted, x, t, 10, tau);
        return std::pair<double, std::vector<double>>{lv.value, *lv.grad_params};
      };
      for (int rep = 0; rep < 5; ++rep)
        REQUIRE(grad_check(f, student.parameters(),
                           random_direction(student.parameter_count(), rng)) < 1e-4);
    }
  }

  SECTION("output dimension mismatch is rejected") {
    EnsembleTeacher wrong = build_ensemble({random_member(make_mlp(2, {4}, 5), rng)}, 0);
    REQUIRE_THROWS_AS(kd_loss(student, wrong, adapted, x, 1, 10, tau), InputError);
  }
}

TEST_CASE("simplex projection") {
  SECTION("points already on the simplex are unchanged") {
    std::vector<double> v = {0.25, 0.25, 0.25, 0.25};
    REQUIRE(project_simplex(v) == v);
  }
  SECTION("symmetric excess splits evenly") {
    auto out = project_simplex({0.8, 0.8});
    REQUIRE(out[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(out[1] == Catch::Approx(0.5).margin(1e-15));
  }
  SECTION("clipping case lands on a vertex") {
    auto out = project_simplex({1.2, -0.2});
    REQUIRE(out[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(out[1] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("matches the grid-search oracle in 2-D") {
    RandomStream rng(2);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> v = {4.0 * rng.normal(), 4.0 * rng.normal()};
      auto out = project_simplex(v);
      auto grid = grid_projection_2d(v, 10000);
      REQUIRE(std::abs(out[0] - grid[0]) < 1e-3);
      REQUIRE(std::abs(out[1] - grid[1]) < 1e-3);
    }
  }
  SECTION("never farther from the input than any 3-D grid point") {
    RandomStream rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> v = {2.0 * rng.normal(), 2.0 * rng.normal(),
                               2.0 * rng.normal()};
      auto out = project_simplex(v);
      double d_out = 0.0;
      for (std::size_t i = 0; i < 3; ++i)
        d_out += (out[i] - v[i]) * (out[i] - v[i]);
      REQUIRE(std::sqrt(d_out) <= grid_best_distance_3d(v, 100) + 1e-6);
      double sum = 0.0;
      for (double x : out) {
        REQUIRE(x >= 0.0);
        sum += x;
      }
      REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
  }
  SECTION("non-finite input is rejected") {
    REQUIRE_THROWS_AS(project_simplex({0.5, std::nan("")}), InputError);
  }
}

TEST_CASE("inner update") {
  RandomStream rng(4);
  ToySetup s = make_toy_setup(2, rng);
  Model g0 = Model::random_init(s.arch, rng);
  BilevelConfig cfg;
  cfg.inner_lr = 0.1;
  cfg.temperature = 4.0;

  SECTION("one-hot weights reduce to a plain KD step on that cluster") {
    Model g = g0;
    inner_update(g, {1.0, 0.0}, s.train_batches, s.orig_ptrs, s.adapt_ptrs, 3, 10, cfg);

    LossValue lv = kd_loss(g0, s.originals[0], s.adapteds[0].teacher,
                           s.train_batches[0], 3, 10, cfg.temperature);
    Model expect = g0;
    expect.add_scaled_to_parameters(-cfg.inner_lr, *lv.grad_params);
    REQUIRE(g.parameters() == expect.parameters());
  }

  SECTION("zero learning rate leaves the model untouched") {
    Model g = g0;
    BilevelConfig frozen = cfg;
    frozen.inner_lr = 0.0;
    inner_update(g, {0.5, 0.5}, s.train_batches, s.orig_ptrs, s.adapt_ptrs, 3, 10,
                 frozen);
    REQUIRE(g.parameters() == g0.parameters());
  }

  SECTION("two-cluster step matches the hand-computed weighted combination") {
    std::vector<double> w = {0.3, 0.7};
    Model g = g0;
    InnerResult res =
        inner_update(g, w, s.train_batches, s.orig_ptrs, s.adapt_ptrs, 5, 10, cfg);

    LossValue l0 = kd_loss(g0, s.originals[0], s.adapteds[0].teacher,
                           s.train_batches[0], 5, 10, cfg.temperature);
    LossValue l1 = kd_loss(g0, s.originals[1], s.adapteds[1].teacher,
                           s.train_batches[1], 5, 10, cfg.temperature);
    REQUIRE(res.source_losses[0] == Catch::Approx(l0.value).epsilon(1e-12));
    REQUIRE(res.source_losses[1] == Catch::Approx(l1.value).epsilon(1e-12));
    for (std::size_t i = 0; i < g0.parameter_count(); ++i) {
      double expect = g0.parameters()[i] -
                      cfg.inner_lr * (w[0] * (*l0.grad_params)[i] +
                                      w[1] * (*l1.grad_params)[i]);
      REQUIRE(g.parameters()[i] == Catch::Approx(expect).margin(1e-15));
    }
  }
}

TEST_CASE("outer update") {
  RandomStream rng(5);
  ToySetup s = make_toy_setup(2, rng);
  BilevelConfig cfg;
  cfg.inner_lr = 0.1;
  cfg.outer_lr = 0.5;
  cfg.temperature = 4.0;

  SECTION("zero cached gradients leave weights unchanged") {
    Model g = Model::random_init(s.arch, rng);
    InnerResult cached;
    cached.source_grads.assign(2, std::vector<double>(g.parameter_count(), 0.0));
    cached.source_losses.assign(2, 0.0);
    OuterResult res = outer_update(g, {0.5, 0.5}, cached, s.val_batches[0],
                                   s.originals[0], s.adapteds[0].teacher, 2, 10, cfg);
    REQUIRE(res.weights == std::vector<double>{0.5, 0.5});
    REQUIRE(res.hypergradient[0] == 0.0);
    REQUIRE(res.hypergradient[1] == 0.0);
  }

  SECTION("a source aligned with the validation gradient gains weight") {
    Model g = Model::random_init(s.arch, rng);
    // validation gradient at g
    LossValue val = kd_loss(g, s.originals[0], s.adapteds[0].teacher, s.val_batches[0],
                            2, 10, cfg.temperature);
    InnerResult cached;
    cached.source_grads.push_back(*val.grad_params);  // aligned: helpful source
    std::vector<double> anti = *val.grad_params;
    for (auto& v : anti) v = -v;
    cached.source_grads.push_back(anti);  // anti-aligned: harmful source
    cached.source_losses.assign(2, 0.0);

    OuterResult res = outer_update(g, {0.5, 0.5}, cached, s.val_batches[0],
                                   s.originals[0], s.adapteds[0].teacher, 2, 10, cfg);
    REQUIRE(res.hypergradient[0] < 0.0);  // descent increases this weight
    REQUIRE(res.hypergradient[1] > 0.0);
    REQUIRE(res.weights[0] > 0.5);
    REQUIRE(res.weights[1] < 0.5);
  }

  SECTION("hypergradient matches finite differences through the inner step") {
    const double h = 1e-5;
    for (int rep = 0; rep < 10; ++rep) {
      Model g0 = Model::random_init(s.arch, rng);
      std::vector<double> w = {0.4, 0.6};
      std::size_t t = 1 + rep % 10;

      Model g = g0;
      InnerResult cached =
          inner_update(g, w, s.train_batches, s.orig_ptrs, s.adapt_ptrs, t, 10, cfg);
      OuterResult res = outer_update(g, w, cached, s.val_batches[0], s.originals[0],
                                     s.adapteds[0].teacher, t, 10, cfg);

      for (std::size_t j = 0; j < 2; ++j) {
        auto val_at = [&](double wj) {
          std::vector<double> wp = w;
          wp[j] = wj;
          Model gp = g0;
          inner_update(gp, wp, s.train_batches, s.orig_ptrs, s.adapt_ptrs, t, 10, cfg);
          return kd_loss(gp, s.originals[0], s.adapteds[0].teacher, s.val_batches[0],
                         t, 10, cfg.temperature)
              .value;
        };
        double fd = (val_at(w[j] + h) - val_at(w[j] - h)) / (2.0 * h);
        double rel = std::abs(res.hypergradient[j] - fd) /
                     std::max(1.0, std::abs(res.hypergradient[j]));
        REQUIRE(rel < 1e-4);
      }
    }
  }
}

namespace {

// Two-cluster stage-1 outputs: cluster 0 trained normally, cluster 1 trained
// on shuffled labels (an adversarial knowledge source).
struct NegativeTransferSetup {
  std::vector<Trajectory> trajectories;
  std::vector<EnsembleTeacher> originals;
  std::vector<NoiseAdaptedTeacher> adapteds;
  Architecture arch = make_mlp(2, {12}, 4);
};

NegativeTransferSetup make_negative_transfer(std::uint64_t seed) {
  DatasetSpec spec;
  spec.classes = 4;
  spec.samples = 600;
  spec.dim = 2;
  spec.noise = 0.35;
  spec.separation = 3.0;
  Dataset data = make_toy_dataset(spec, seed);

  Dataset shuffled = data;
  RandomStream srng = RandomStream::substream(seed, "label-shuffle");
  srng.shuffle(shuffled.labels);

  NegativeTransferSetup s;
  ClientModel good = train_local(0, data, s.arch, {40, 5e-2, 32}, seed);
  ClientModel bad = train_local(1, shuffled, s.arch, {40, 5e-2, 32}, seed + 1);

  s.originals.push_back(
      build_ensemble({std::make_shared<const Model>(good.model)}, 0));
  s.originals.push_back(build_ensemble({std::make_shared<const Model>(bad.model)}, 1));

  SynthConfig sc;
  sc.iterations = 30;
  sc.batch = 32;
  sc.lr = 5e-2;
  sc.alpha_tv = 0.0;
  sc.alpha_bn = 0.1;
  for (std::size_t c = 0; c < 2; ++c) {
    s.trajectories.push_back(synthesize_trajectory(s.originals[c], sc, seed));
    s.adapteds.push_back(adapt_teacher_bn(s.originals[c], s.trajectories[c], 0.9));
  }
  return s;
}

}  // namespace

TEST_CASE("online bilevel run") {
  RandomStream rng(7);
  BilevelConfig cfg;
  cfg.inner_lr = 5e-2;
  cfg.outer_lr = 10.0;
  cfg.temperature = 4.0;

  SECTION("single cluster pins the weight at one") {
    NegativeTransferSetup s = make_negative_transfer(0);
    std::vector<Trajectory> one_traj = {s.trajectories[0]};
    std::vector<EnsembleTeacher> one_orig = {s.originals[0]};
    std::vector<NoiseAdaptedTeacher> one_adapt = {s.adapteds[0]};
    auto states =
        run_online_bilevel(one_traj, one_orig, one_adapt, s.arch, cfg,
                           WeightMode::Learned, {}, 3);
    REQUIRE(states.size() == 1);
    for (const auto& w : states[0].weight_history) {
      REQUIRE(w.size() == 1);
      REQUIRE(w[0] == 1.0);
    }
  }

  SECTION("frozen-self mode equals a manual one-hot inner loop") {
    NegativeTransferSetup s = make_negative_transfer(1);
    auto states = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                     cfg, WeightMode::FrozenSelf, {}, 5);

    // manual replay for cluster 0
    RandomStream ginit = RandomStream::substream(5, "cluster-model-init", 0);
    Model g = Model::random_init(s.arch, ginit);
    SplitIndex split = make_split(32, cfg.train_fraction);
    std::vector<const EnsembleTeacher*> op = {&s.originals[0], &s.originals[1]};
    std::vector<const EnsembleTeacher*> ap = {&s.adapteds[0].teacher,
                                              &s.adapteds[1].teacher};
    BilevelConfig frozen = cfg;
    frozen.outer_lr = 0.0;
    for (std::size_t i = 0; i < s.trajectories[0].snapshots.size(); ++i) {
      std::vector<Tensor> tb;
      for (std::size_t j = 0; j < 2; ++j)
        tb.push_back(s.trajectories[j].snapshots[i].gather_rows(split.train_idx));
      inner_update(g, {1.0, 0.0}, tb, op, ap, s.trajectories[0].snapshot_iters[i],
                   s.trajectories[0].total_iterations, frozen);
    }
    REQUIRE(states[0].model.parameters() == g.parameters());
  }

  SECTION("zero outer rate is parameter-identical to frozen uniform") {
    NegativeTransferSetup s = make_negative_transfer(2);
    BilevelConfig zero = cfg;
    zero.outer_lr = 0.0;
    auto learned = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                      zero, WeightMode::Learned, {}, 7);
    auto uniform = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                      cfg, WeightMode::FrozenUniform, {}, 7);
    for (std::size_t c = 0; c < 2; ++c) {
      REQUIRE(learned[c].model.parameters() == uniform[c].model.parameters());
      REQUIRE(learned[c].weight_history == uniform[c].weight_history);
    }
  }

  SECTION("weights stay on the simplex every iteration") {
    NegativeTransferSetup s = make_negative_transfer(3);
    auto states = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                     cfg, WeightMode::Learned, {}, 9);
    for (const auto& st : states)
      for (const auto& w : st.weight_history) {
        double sum = 0.0;
        for (double v : w) {
          REQUIRE(v >= 0.0);
          sum += v;
        }
        REQUIRE(std::abs(sum - 1.0) <= 1e-9);
      }
  }

  SECTION("teachers are bit-identical before and after stage 2") {
    NegativeTransferSetup s = make_negative_transfer(4);
    std::vector<double> params_before = s.originals[1].members[0]->parameters();
    std::vector<double> mean_before =
        s.adapteds[1].teacher.members[0]->bn_states()[0].running_mean;
    run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch, cfg,
                       WeightMode::Learned, {}, 11);
    REQUIRE(s.originals[1].members[0]->parameters() == params_before);
    REQUIRE(s.adapteds[1].teacher.members[0]->bn_states()[0].running_mean ==
            mean_before);
  }

  SECTION("trajectory length mismatch is rejected") {
    NegativeTransferSetup s = make_negative_transfer(5);
    s.trajectories[1].snapshots.pop_back();
    s.trajectories[1].snapshot_iters.pop_back();
    REQUIRE_THROWS_AS(
        run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch, cfg,
                           WeightMode::Learned, {}, 0),
        InputError);
  }
}

TEST_CASE("learned weights suppress an adversarial source cluster") {
  int below_uniform = 0;
  int not_worse_than_uniform = 0;
  const int kSeeds = 3;
  BilevelConfig cfg;
  cfg.inner_lr = 5e-2;
  cfg.outer_lr = 10.0;
  cfg.temperature = 4.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    NegativeTransferSetup s = make_negative_transfer(100 + seed);
    auto learned = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                      cfg, WeightMode::Learned, {}, seed);
    auto uniform = run_online_bilevel(s.trajectories, s.originals, s.adapteds, s.arch,
                                      cfg, WeightMode::FrozenUniform, {}, seed);
    if (learned[0].weights[1] < 0.5) ++below_uniform;
    if (learned[0].val_loss_history.back() <= uniform[0].val_loss_history.back())
      ++not_worse_than_uniform;
  }
  REQUIRE(below_uniform >= 2);
  REQUIRE(not_worse_than_uniform >= 2);
}
