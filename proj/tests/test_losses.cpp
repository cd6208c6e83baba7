#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "msd/errors.hpp"
#include "msd/gradcheck.hpp"
#include "msd/losses.hpp"
#include "test_util.hpp"

using namespace msd;
using msd::testing::random_tensor;
using msd::testing::random_unit_rows;

namespace {

ad::Var tau_const(ad::Tape& t, double tau) { return t.constant(Tensor::scalar(tau)); }

}  // namespace

TEST_CASE("loss config defaults and validation") {
  LossConfig cfg;
  CHECK(cfg.alpha == 0.3);
  CHECK(cfg.beta == 0.7);
  CHECK(cfg.omega_uni == 1.0);
  CHECK(cfg.omega_multi == 10.0);
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha = cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.alpha = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.omega_uni = cfg.omega_multi = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  CHECK(parse_loss_mode("msd") == LossMode::msd);
  CHECK(parse_loss_mode("onehot") == LossMode::onehot);
  CHECK(parse_loss_mode("end2end") == LossMode::end2end);
  CHECK(to_string(LossMode::onehot) == "onehot");
  CHECK_THROWS_AS(parse_loss_mode("bogus"), ConfigError);
}

TEST_CASE("infonce_uni hand cases") {
  ad::Tape t;
  const std::vector<std::size_t> pos{0};
  const auto q = t.constant(Tensor::matrix({{1, 0}}));
  CHECK(infonce_uni(q, pos, Tensor::matrix({{1, 0}}), tau_const(t, 1.0)).value().item() == doctest::Approx(0.0));
  const Tensor keys = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(infonce_uni(q, pos, keys, tau_const(t, 1.0)).value().item() ==
        doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
  CHECK(std::log1p(std::exp(-1.0)) == doctest::Approx(0.313262).epsilon(1e-6));
  CHECK(infonce_uni(q, pos, keys, tau_const(t, 0.5)).value().item() ==
        doctest::Approx(0.126928).epsilon(1e-6));
  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(infonce_uni(q, bad, keys, tau_const(t, 1.0)), IndexError);
}

TEST_CASE("uni, multi and total combination") {
  ad::Tape t;
  auto s = [&](double v) { return t.constant(Tensor::scalar(v)); };
  CHECK(uni_loss(s(0), s(0)).value().item() == 0.0);
  CHECK(uni_loss(s(1), s(3)).value().item() == 2.0);
  CHECK(multi_loss(s(0.4), s(0.6)).value().item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(total_loss(s(11), s(0), 1, 10).value().item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(total_loss(s(2.5), s(7), 1, 0).value().item() == 2.5);
  CHECK_THROWS_AS(total_loss(s(1), s(1), 0, 0), ConfigError);

  ad::Tape g;
  const auto a = g.leaf(Tensor::scalar(1.0));
  const auto b = g.leaf(Tensor::scalar(3.0));
  g.backward(uni_loss(a, b));
  CHECK(g.grad(a)[0] == 0.5);
  CHECK(g.grad(b)[0] == 0.5);
  ad::Tape h;
  const auto c = h.leaf(Tensor::scalar(0.4));
  const auto d = h.leaf(Tensor::scalar(0.6));
  h.backward(multi_loss(c, d));
  CHECK(h.grad(c)[0] == 0.5);
  CHECK(h.grad(d)[0] == 0.5);
}

TEST_CASE("msd teacher targets") {
  // Orthonormal keys, tau = 1, K = 2.
  const Tensor keys = Tensor::matrix({{1, 0}, {0, 1}});
  const std::vector<std::size_t> paired{0};
  const TeacherTargets tt = msd_targets(Tensor::matrix({{1, 0}}), paired, keys, 1.0);
  CHECK(tt.k2k[0] == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(tt.k2k[1] == doctest::Approx(0.26894).epsilon(1e-5));
  // Identical momentum query and paired key give identical teachers.
  CHECK(max_abs_diff(tt.q2k, tt.k2k) < 1e-15);

  CounterRng rng(9);
  const Tensor many = random_unit_rows(12, 5, rng);
  const Tensor mq = random_unit_rows(4, 5, rng);
  const std::vector<std::size_t> rows{3, 0, 11, 7};
  const TeacherTargets r = msd_targets(mq, rows, many, 0.07);
  for (std::size_t i = 0; i < 4; ++i) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < 12; ++j) {
      s1 += r.q2k(i, j);
      s2 += r.k2k(i, j);
      CHECK(r.k2k(i, j) <= r.k2k(i, rows[i]));
    }
    CHECK(std::abs(s1 - 1.0) < 1e-9);
    CHECK(std::abs(s2 - 1.0) < 1e-9);
  }
}

TEST_CASE("msd_loss values") {
  ad::Tape t;
  const Tensor uniform = Tensor::matrix({{0.5, 0.5}});
  const auto student = t.constant(Tensor::matrix({{std::log(0.5), std::log(0.5)}}));
  CHECK(msd_loss(student, uniform, uniform, 0.3, 0.7).value().item() == doctest::Approx(0.0));
  const double v = msd_loss(student, uniform, Tensor::matrix({{1, 0}}), 0.3, 0.7).value().item();
  CHECK(v == doctest::Approx(0.7 * std::log(2.0)).epsilon(1e-12));
  CHECK(v == doctest::Approx(0.485203).epsilon(1e-6));
}

TEST_CASE("msd_loss gradient wrt student logits") {
  CounterRng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor p1 = ad::softmax_rows(random_tensor({3, 6}, rng), 1.0);
    const Tensor p2 = ad::softmax_rows(random_tensor({3, 6}, rng), 1.0);
    const double tau = rng.uniform(0.1, 1.0);
    auto f = [&](ad::Tape& tp, ad::Var logits) {
      return msd_loss(ad::scaled_log_softmax_rows(logits, tau_const(tp, tau)), p1, p2, 0.3, 0.7);
    };
    const Tensor x = random_tensor({3, 6}, rng);
    ad::Tape tape;
    const auto leaf = tape.leaf(x);
    tape.backward(f(tape, leaf));
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& p) {
          ad::Tape tp;
          return f(tp, tp.constant(p)).value().item();
        },
        x);
    CHECK(relative_error(tape.grad(leaf), numeric) < 1e-6);
  }
}

TEST_CASE("one-hot baseline equals msd with a one-hot teacher") {
  CounterRng rng(11);
  const Tensor logits = random_tensor({4, 7}, rng);
  const std::vector<std::size_t> pos{1, 6, 0, 3};
  Tensor onehot(Shape{4, 7});
  for (std::size_t i = 0; i < 4; ++i) onehot(i, pos[i]) = 1.0;
  ad::Tape t;
  const auto l = t.constant(logits);
  const double a = onehot_multi_loss(l, pos, tau_const(t, 0.3)).value().item();
  const double b = msd_loss(ad::scaled_log_softmax_rows(l, tau_const(t, 0.3)), onehot, onehot, 0.0, 1.0).value().item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));

  const std::vector<std::size_t> zero{0};
  CHECK(onehot_multi_loss(t.constant(Tensor::matrix({{0.4}})), zero, tau_const(t, 1.0)).value().item() ==
        doctest::Approx(0.0));
  const auto two = similarities(t.constant(Tensor::matrix({{1, 0}})), Tensor::matrix({{1, 0}, {0, 1}}));
  CHECK(onehot_multi_loss(two, zero, tau_const(t, 1.0)).value().item() ==
        doctest::Approx(0.313262).epsilon(1e-6));
}

TEST_CASE("end2end in-batch loss") {
  ad::Tape t;
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const auto terms = end2end_terms(t.constant(eye), t.constant(eye), tau_const(t, 1.0));
  const double expected = std::log1p(std::exp(-1.0));
  CHECK(terms.image_to_text.value().item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(terms.text_to_image.value().item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(end2end_loss(t.constant(eye), t.constant(eye), tau_const(t, 1.0)).value().item() ==
        doctest::Approx(expected).epsilon(1e-12));

  const Tensor anti = Tensor::matrix({{1, 0}, {-1, 0}});
  CHECK(end2end_loss(t.constant(anti), t.constant(anti), tau_const(t, 0.01)).value().item() < 0.05);

  CHECK_THROWS_AS(end2end_loss(t.constant(Tensor::matrix({{1, 0}})), t.constant(Tensor::matrix({{1, 0}})),
                               tau_const(t, 1.0)),
                  DegenerateBatchError);

  CounterRng rng(12);
  const Tensor img = random_unit_rows(5, 4, rng);
  const Tensor txt = random_unit_rows(5, 4, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const double base = end2end_loss(t.constant(img), t.constant(txt), tau_const(t, 0.2)).value().item();
  const double permuted =
      end2end_loss(t.constant(gather_rows(img, perm)), t.constant(gather_rows(txt, perm)), tau_const(t, 0.2))
          .value()
          .item();
  CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("losses are non-negative and finite on unit inputs") {
  CounterRng rng(13);
  for (double tau : {0.01, 0.07, 1.0}) {
    ad::Tape t;
    const Tensor keys = random_unit_rows(20, 6, rng);
    const Tensor q = random_unit_rows(4, 6, rng);
    const Tensor mq = random_unit_rows(4, 6, rng);
    const std::vector<std::size_t> pos{0, 5, 9, 19};
    const double u = infonce_uni(t.constant(q), pos, keys, tau_const(t, tau)).value().item();
    const TeacherTargets tt = msd_targets(mq, pos, keys, tau);
    const double m =
        msd_loss(ad::scaled_log_softmax_rows(similarities(t.constant(q), keys), tau_const(t, tau)), tt.q2k, tt.k2k, 0.3, 0.7)
            .value()
            .item();
    const double e = end2end_loss(t.constant(q), t.constant(mq), tau_const(t, tau)).value().item();
    for (double v : {u, m, e}) {
      CHECK(v >= -1e-12);
      CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("teacher side receives exactly zero gradient") {
  CounterRng rng(14);
  const Tensor keys = random_unit_rows(8, 4, rng);
  const std::vector<std::size_t> pos{2, 5};
  ad::Tape t;
  const auto q = t.leaf(random_unit_rows(2, 4, rng));
  const auto mq_leaf = t.leaf(random_unit_rows(2, 4, rng));
  // The teacher is built from a detached copy of a leaf; that leaf must get no gradient.
  const TeacherTargets tt = msd_targets(ad::detach(mq_leaf), pos, keys, 0.5);
  t.backward(msd_loss(ad::scaled_log_softmax_rows(similarities(q, keys), tau_const(t, 0.5)), tt.q2k, tt.k2k, 0.3, 0.7));
  CHECK(max_abs(t.grad(mq_leaf)) == 0.0);
  CHECK(max_abs(t.grad(q)) > 0.0);

  // Perturbing the teacher input changes the loss value.
  const TeacherTargets moved = msd_targets(random_unit_rows(2, 4, rng), pos, keys, 0.5);
  ad::Tape t2;
  const auto sl = ad::scaled_log_softmax_rows(similarities(t2.constant(q.value()), keys), tau_const(t2, 0.5));
  CHECK(msd_loss(sl, tt.q2k, tt.k2k, 0.3, 0.7).value().item() !=
        msd_loss(sl, moved.q2k, moved.k2k, 0.3, 0.7).value().item());
}
