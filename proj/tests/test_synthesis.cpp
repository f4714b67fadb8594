#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>

#include "fedbicross/synthesis.hpp"
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

}  // namespace

TEST_CASE("deep inversion loss reduces to cross entropy and is additive") {
  RandomStream rng(1);
  Architecture arch = make_mlp(2, {6}, 4);
  auto m0 = random_member(arch, rng);
  auto m1 = random_member(arch, rng);
  Tensor x = Tensor::randn({6, 2}, rng);
  std::vector<std::size_t> labels = {0, 1, 2, 3, 0, 1};

  SECTION("single member, zero coefficients: exactly cross entropy") {
    EnsembleTeacher t = build_ensemble({m0}, 0);
    LossValue di = deep_inversion_loss(x, t, labels, 0.0, 0.0);
    Tensor logits = m0->forward_traced(x, BnMode::RunningStats).logits();
    REQUIRE(di.value == Catch::Approx(cross_entropy(logits, labels).value).epsilon(1e-12));
  }

  SECTION("ensemble cross entropy matches a direct mean-probability formula") {
    EnsembleTeacher t = build_ensemble({m0, m1}, 0);
    LossValue di = deep_inversion_loss(x, t, labels, 0.0, 0.0);
    Tensor p0 = softmax_rows(m0->forward_traced(x, BnMode::RunningStats).logits());
    Tensor p1 = softmax_rows(m1->forward_traced(x, BnMode::RunningStats).logits());
    double expect = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      expect -= std::log(0.5 * (p0.at2(i, labels[i]) + p1.at2(i, labels[i]))) / 6.0;
    REQUIRE(di.value == Catch::Approx(expect).epsilon(1e-12));
  }

  SECTION("value is the sum of the three independently computed terms") {
    Architecture carch = make_cnn({1, 5, 5}, 2, 3);
    auto c0 = random_member(carch, rng);
    auto c1 = random_member(carch, rng);
    EnsembleTeacher t = build_ensemble({c0, c1}, 0);
    Tensor img = Tensor::randn({4, 1, 5, 5}, rng);
    std::vector<std::size_t> y = {0, 1, 2, 0};
    const double atv = 3e-3, abn = 0.7;

    DiLossTerms terms;
    LossValue di = deep_inversion_loss(img, t, y, atv, abn, &terms);

    double ce = deep_inversion_loss(img, t, y, 0.0, 0.0).value;
    double tv = total_variation(img).value;
    double bn = 0.0;
    for (const auto& member : t.members) {
      auto tr = member->forward_traced(img, BnMode::RunningStats);
      bn += bn_regularizer(tr.batch_stats(), member->bn_states()).value;
    }
    REQUIRE(terms.ce == Catch::Approx(ce).epsilon(1e-12));
    REQUIRE(terms.tv == Catch::Approx(tv).epsilon(1e-12));
    REQUIRE(terms.bn == Catch::Approx(bn).epsilon(1e-12));
    REQUIRE(di.value == Catch::Approx(ce + atv * tv + abn * bn).epsilon(1e-12));
  }

  SECTION("TV on non-image input is rejected") {
    EnsembleTeacher t = build_ensemble({m0}, 0);
    REQUIRE_THROWS_AS(deep_inversion_loss(x, t, labels, 1e-3, 0.0), InputError);
    REQUIRE_NOTHROW(deep_inversion_loss(x, t, labels, 0.0, 1.0));
  }
}

TEST_CASE("deep inversion input gradient matches finite differences") {
  RandomStream rng(2);
  Architecture carch = make_cnn({1, 5, 5}, 2, 3);
  auto c0 = random_member(carch, rng);
  auto c1 = random_member(carch, rng);
  Tensor img = Tensor::randn({4, 1, 5, 5}, rng);
  std::vector<std::size_t> y = {2, 1, 0, 1};

  for (bool avg_logits : {false, true}) {
    EnsembleTeacher t = build_ensemble({c0, c1}, 0, avg_logits);
    auto f = [&](const std::vector<double>& flat) {
      Tensor z({4, 1, 5, 5}, flat);
      LossValue lv = deep_inversion_loss(z, t, y, 2.5e-3, 0.8);
      return std::pair<double, std::vector<double>>{lv.value, lv.grad_input->data};
    };
    for (int rep = 0; rep < 10; ++rep)
      REQUIRE(grad_check(f, img.data, random_direction(img.numel(), rng)) < 1e-4);
  }
}

TEST_CASE("synthesis trajectory mechanics") {
  RandomStream rng(3);
  Architecture arch = make_mlp(2, {6}, 4);
  EnsembleTeacher t = build_ensemble({random_member(arch, rng)}, 0);

  SynthConfig cfg;
  cfg.iterations = 3;
  cfg.batch = 8;
  cfg.alpha_tv = 0.0;
  cfg.alpha_bn = 0.5;
  cfg.optimizer = SynthOptimizer::Sgd;

  SECTION("zero learning rate freezes the batch") {
    cfg.lr = 0.0;
    Trajectory traj = synthesize_trajectory(t, cfg, 7);
    REQUIRE(traj.snapshots.size() == 3);
    REQUIRE(traj.snapshots[1].data == traj.snapshots[0].data);
    REQUIRE(traj.snapshots[2].data == traj.snapshots[0].data);
  }

  SECTION("one SGD step equals the definitional update") {
    cfg.lr = 0.0;
    cfg.iterations = 1;
    Trajectory frozen = synthesize_trajectory(t, cfg, 7);
    const Tensor& x0 = frozen.snapshots[0];

    cfg.lr = 0.05;
    Trajectory stepped = synthesize_trajectory(t, cfg, 7);
    REQUIRE(stepped.labels == frozen.labels);

    LossValue lv = deep_inversion_loss(x0, t, frozen.labels, cfg.alpha_tv, cfg.alpha_bn);
    for (std::size_t i = 0; i < x0.numel(); ++i)
      REQUIRE(stepped.snapshots[0].data[i] ==
              Catch::Approx(x0.data[i] - cfg.lr * lv.grad_input->data[i]).margin(1e-15));
  }

  SECTION("deterministic under seed, different across seeds") {
    cfg.lr = 0.05;
    Trajectory a = synthesize_trajectory(t, cfg, 11);
    Trajectory b = synthesize_trajectory(t, cfg, 11);
    Trajectory c = synthesize_trajectory(t, cfg, 12);
    REQUIRE(a.labels == b.labels);
    for (std::size_t s = 0; s < a.snapshots.size(); ++s)
      REQUIRE(a.snapshots[s].data == b.snapshots[s].data);
    REQUIRE(a.snapshots[0].data != c.snapshots[0].data);
  }

  SECTION("labels are near-uniform over classes") {
    cfg.batch = 10;  // 10 over 4 classes: counts must be 2 or 3
    Trajectory traj = synthesize_trajectory(t, cfg, 13);
    std::vector<std::size_t> hist(4, 0);
    for (auto y : traj.labels) ++hist[y];
    for (auto h : hist) {
      REQUIRE(h >= 2);
      REQUIRE(h <= 3);
    }
  }

  SECTION("snapshot stride keeps the final iterate") {
    cfg.iterations = 5;
    cfg.stride = 2;
    Trajectory traj = synthesize_trajectory(t, cfg, 15);
    REQUIRE(traj.snapshot_iters == std::vector<std::size_t>{2, 4, 5});
  }

  SECTION("divergence raises a diagnostic error") {
    Architecture carch = make_cnn({1, 4, 4}, 2, 3);
    RandomStream crng(4);
    EnsembleTeacher ct = build_ensemble({random_member(carch, crng)}, 0);
    SynthConfig bad;
    bad.iterations = 3;
    bad.batch = 4;
    bad.lr = 1e160;
    bad.alpha_tv = 1.0;
    bad.alpha_bn = 0.0;
    bad.optimizer = SynthOptimizer::Sgd;
    REQUIRE_THROWS_AS(synthesize_trajectory(ct, bad, 1), DivergenceError);
  }
}

TEST_CASE("synthesis drives the confidence term down on a trained teacher") {
  double first_total = 0.0, last_total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Dataset data = [&] {
      DatasetSpec s;
      s.classes = 4;
      s.samples = 400;
      s.dim = 2;
      s.noise = 0.35;
      s.separation = 3.0;
      return make_toy_dataset(s, seed);
    }();
    RandomStream rng = RandomStream::substream(seed, "synth-teacher");
    Model teacher_model = Model::random_init(make_mlp(2, {16}, 4), rng);
    sgd_train(teacher_model, data, {40, 5e-2, 32}, rng);
    EnsembleTeacher t =
        build_ensemble({std::make_shared<const Model>(std::move(teacher_model))}, 0);

    SynthConfig cfg;
    cfg.iterations = 40;
    cfg.batch = 32;
    cfg.lr = 5e-2;
    cfg.alpha_tv = 0.0;
    cfg.alpha_bn = 0.1;
    cfg.optimizer = SynthOptimizer::Adam;
    Trajectory traj = synthesize_trajectory(t, cfg, seed);
    first_total += traj.losses.front().ce;
    last_total += traj.losses.back().ce;
  }
  REQUIRE(last_total / 5.0 < first_total / 5.0);
}

TEST_CASE("noise adaptation follows the momentum recurrence") {
  RandomStream rng(5);

  SECTION("fixed point: batch statistics equal to running statistics") {
    Architecture arch = make_mlp(2, {5}, 3);
    Model base = Model::random_init(arch, rng);
    Tensor snap = Tensor::randn({8, 2}, rng);
    auto tr = base.forward_traced(snap, BnMode::RunningStats);
    base.update_running_stats(tr.batch_stats(), 0.0);  // replace with batch stats

    EnsembleTeacher t = build_ensemble({std::make_shared<const Model>(base)}, 0);
    Trajectory traj;
    traj.snapshots = {snap};
    traj.snapshot_iters = {1};
    traj.total_iterations = 1;

    NoiseAdaptedTeacher adapted = adapt_teacher_bn(t, traj, 0.9);
    const auto& before = base.bn_states()[0];
    const auto& after = adapted.teacher.members[0]->bn_states()[0];
    for (std::size_t c = 0; c < before.running_mean.size(); ++c) {
      REQUIRE(after.running_mean[c] ==
              Catch::Approx(before.running_mean[c]).margin(1e-14));
      REQUIRE(after.running_var[c] ==
              Catch::Approx(before.running_var[c]).margin(1e-14));
    }
  }

  SECTION("single update from zero mean to batch mean one gives 0.1") {
    Architecture arch;
    arch.input_shape = {2};
    arch.num_classes = 2;
    arch.layers = {batch_norm(2), dense(2, 2)};
    Model base(arch);  // running mean 0, var 1
    // batch whose raw per-channel mean is exactly 1 (BN is the first layer)
    Tensor snap({4, 2}, {0.0, 2.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0});
    // channel 0: {0,2,1,1} mean 1 var 0.5 ; channel 1: {2,0,1,1} mean 1 var 0.5
    EnsembleTeacher t = build_ensemble({std::make_shared<const Model>(base)}, 0);
    Trajectory traj;
    traj.snapshots = {snap};
    traj.snapshot_iters = {1};
    traj.total_iterations = 1;

    NoiseAdaptedTeacher adapted = adapt_teacher_bn(t, traj, 0.9);
    const auto& st = adapted.teacher.members[0]->bn_states()[0];
    for (std::size_t c = 0; c < 2; ++c) {
      REQUIRE(st.running_mean[c] == Catch::Approx(0.1).margin(1e-12));
      REQUIRE(st.running_var[c] == Catch::Approx(0.9 * 1.0 + 0.1 * 0.5).margin(1e-12));
    }
  }

  SECTION("repeated identical batches converge geometrically with ratio beta") {
    Architecture arch = make_mlp(2, {4}, 3);
    Model base = Model::random_init(arch, rng);
    Tensor snap = Tensor::randn({16, 2}, rng);
    auto target = base.forward_traced(snap, BnMode::RunningStats).batch_stats();
    EnsembleTeacher t = build_ensemble({std::make_shared<const Model>(base)}, 0);

    const double beta = 0.9;
    std::vector<double> gaps;
    for (std::size_t steps = 1; steps <= 4; ++steps) {
      Trajectory traj;
      traj.total_iterations = steps;
      for (std::size_t s = 0; s < steps; ++s) {
        traj.snapshots.push_back(snap);
        traj.snapshot_iters.push_back(s + 1);
      }
      NoiseAdaptedTeacher adapted = adapt_teacher_bn(t, traj, beta);
      gaps.push_back(adapted.teacher.members[0]->bn_states()[0].running_mean[0] -
                     target[0].mean[0]);
    }
    for (std::size_t i = 1; i < gaps.size(); ++i)
      REQUIRE(gaps[i] / gaps[i - 1] == Catch::Approx(beta).margin(1e-9));
  }

  SECTION("adaptation replays the recurrence over a real trajectory") {
    Architecture arch = make_mlp(2, {5}, 3);
    Model base = Model::random_init(arch, rng);
    EnsembleTeacher t = build_ensemble({std::make_shared<const Model>(base)}, 0);

    SynthConfig cfg;
    cfg.iterations = 4;
    cfg.batch = 8;
    cfg.lr = 0.1;
    cfg.alpha_tv = 0.0;
    cfg.alpha_bn = 1.0;
    cfg.optimizer = SynthOptimizer::Sgd;
    Trajectory traj = synthesize_trajectory(t, cfg, 21);

    const double beta = 0.8;
    NoiseAdaptedTeacher adapted = adapt_teacher_bn(t, traj, beta);

    // independent replay: reverse order, convex-combination update
    std::vector<BatchNormState> expect = base.bn_states();
    for (std::size_t s = traj.snapshots.size(); s-- > 0;) {
      auto stats = base.forward_traced(traj.snapshots[s], BnMode::RunningStats).batch_stats();
      for (std::size_t l = 0; l < expect.size(); ++l)
        for (std::size_t c = 0; c < expect[l].running_mean.size(); ++c) {
          // convex combination stays between old and batch values
          double lo = std::min(expect[l].running_mean[c], stats[l].mean[c]);
          double hi = std::max(expect[l].running_mean[c], stats[l].mean[c]);
          expect[l].running_mean[c] =
              beta * expect[l].running_mean[c] + (1.0 - beta) * stats[l].mean[c];
          REQUIRE(expect[l].running_mean[c] >= lo - 1e-15);
          REQUIRE(expect[l].running_mean[c] <= hi + 1e-15);
          expect[l].running_var[c] =
              beta * expect[l].running_var[c] + (1.0 - beta) * stats[l].var[c];
        }
    }
    const auto& got = adapted.teacher.members[0]->bn_states();
    for (std::size_t l = 0; l < expect.size(); ++l)
      for (std::size_t c = 0; c < expect[l].running_mean.size(); ++c) {
        REQUIRE(got[l].running_mean[c] ==
                Catch::Approx(expect[l].running_mean[c]).margin(1e-14));
        REQUIRE(got[l].running_var[c] ==
                Catch::Approx(expect[l].running_var[c]).margin(1e-14));
      }
  }

  SECTION("the original teacher is never mutated") {
    Architecture arch = make_mlp(2, {4}, 3);
    auto member = std::make_shared<const Model>(Model::random_init(arch, rng));
    std::vector<double> params_before = member->parameters();
    std::vector<double> mean_before = member->bn_states()[0].running_mean;

    EnsembleTeacher t = build_ensemble({member}, 0);
    Trajectory traj;
    traj.snapshots = {Tensor::randn({8, 2}, rng)};
    traj.snapshot_iters = {1};
    traj.total_iterations = 1;
    adapt_teacher_bn(t, traj, 0.9);

    REQUIRE(member->parameters() == params_before);
    REQUIRE(member->bn_states()[0].running_mean == mean_before);
  }

  SECTION("input validation") {
    Architecture arch = make_mlp(2, {4}, 3);
    EnsembleTeacher t = build_ensemble({random_member(arch, rng)}, 0);
    Trajectory empty;
    REQUIRE_THROWS_AS(adapt_teacher_bn(t, empty, 0.9), InputError);
    Trajectory one;
    one.snapshots = {Tensor::randn({4, 2}, rng)};
    REQUIRE_THROWS_AS(adapt_teacher_bn(t, one, 0.0), InputError);
    REQUIRE_THROWS_AS(adapt_teacher_bn(t, one, 1.0), InputError);
  }
}
