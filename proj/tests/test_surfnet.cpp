#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "checks.hpp"
#include "sft/adam.hpp"
#include "sft/io.hpp"
#include "sft/surfnet.hpp"

using namespace sft;

TEST(Softplus, ValuesAndOverflowBranch) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_EQ(softplus(40.0), 40.0);
  EXPECT_TRUE(std::isfinite(softplus(1e6)));
  EXPECT_NEAR(softplus(-40.0), std::exp(-40.0), 1e-30);
}

TEST(Softplus, FirstDerivativeIsLogistic) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng);
    EXPECT_NEAR(softplus_d1(x), 1.0 / (1.0 + std::exp(-x)), 1e-12);
    EXPECT_TRUE(std::isfinite(softplus_d2(x)));
    EXPECT_GE(softplus_d2(x), 0.0);
  }
}

TEST(Softplus, BlockMatchesScalar) {
  Eigen::MatrixXd x(3, 5);
  x << -60, -5, -0.1, 0, 0.2, 1, 3, 29.9, 30.1, 200, -700, 7, -2, 2, 0.5;
  Eigen::MatrixXd v(3, 5);
  Eigen::MatrixXd s(3, 5);
  detail::softplus_block(x, v, s);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(v(i), softplus(x(i)), 1e-14 * std::max(1.0, std::abs(x(i))));
    EXPECT_NEAR(s(i), softplus_d1(x(i)), 1e-15);
  }
}

TEST(SurfNet, LayoutMatchesDims) {
  const SurfNet net = SurfNet::zeros({2, 128, 256, 128, 3});
  EXPECT_EQ(net.num_layers(), 4u);
  EXPECT_EQ(net.num_params(), 2u * 128 + 128 + 128 * 256 + 256 + 256 * 128 + 128 + 128 * 3 + 3);
  EXPECT_EQ(net.weight(1).rows(), 256);
  EXPECT_EQ(net.weight(1).cols(), 128);
  EXPECT_THROW(SurfNet::from_params({2, 4, 3}, Eigen::VectorXd::Zero(5)), Error);
}

TEST(SurfNet, ZeroNetIsOrigin) {
  const SurfNet net = SurfNet::zeros({2, 128, 256, 128, 3});
  const EvalBundle b = net.eval_with_jacobian({0.3, 0.8});
  EXPECT_EQ(b.value, Vec3::Zero());
  EXPECT_EQ(b.jacobian, Mat32::Zero());
}

TEST(SurfNet, DeterministicEvaluation) {
  const SurfNet net = SurfNet::random({2, 16, 16, 3}, 9);
  const Vec3 a = net.eval({0.25, 0.75});
  const Vec3 b = net.eval({0.25, 0.75});
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * 3), 0);
  const SurfNet again = SurfNet::random({2, 16, 16, 3}, 9);
  EXPECT_EQ(net.params(), again.params());
}

TEST(SurfNet, RejectsPointsOutsideDomain) {
  const SurfNet net = SurfNet::random({2, 4, 3}, 1);
  EXPECT_NO_THROW(net.eval({1.0 + 5e-10, -5e-10}));
  try {
    net.eval({1.01, 0.5});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OutOfDomain);
  }
}

TEST(SurfNet, GlorotBounds) {
  const SurfNet net = SurfNet::random({2, 128, 256, 3}, 4);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / (net.layer_dims()[l] + net.layer_dims()[l + 1]));
    EXPECT_LE(net.weight(l).cwiseAbs().maxCoeff(), bound);
    EXPECT_EQ(net.bias(l).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(SurfNet, BatchMatchesSinglePoint) {
  const SurfNet net = checks::random_tiny_net(3, {2, 7, 6, 3});
  std::mt19937_64 rng(2);
  const Eigen::Matrix2Xd pts = checks::random_points(rng, 9);
  const BatchOutputs out = net.outputs(net.forward(pts, true));
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    const EvalBundle b = net.eval_with_jacobian(pts.col(i));
    EXPECT_LT((out.value.col(i) - b.value).norm(), 1e-13);
    EXPECT_LT((out.jac_u.col(i) - b.jacobian.col(0)).norm(), 1e-13);
    EXPECT_LT((out.jac_v.col(i) - b.jacobian.col(1)).norm(), 1e-13);
  }
}

TEST(Jacobian, MatchesCentralDifferences) {
  EXPECT_LT(checks::jacobian_check(21, 200), 1e-5);
  EXPECT_LT(checks::jacobian_check(22, 20, {2, 128, 256, 128, 3}), 1e-5);
}

TEST(Backprop, LinearReadoutBiasGradient) {
  const SurfNet net = SurfNet::zeros({2, 4, 4, 3});
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
  Eigen::Matrix2Xd p(2, 1);
  p << 0.4, 0.6;
  backprop_scalar(
      net, p, false,
      [](const BatchOutputs& out, BatchAdjoints& adj) {
        adj.value.setOnes();
        return out.value.sum();
      },
      grad);
  const std::size_t off = net.bias_offset(net.num_layers() - 1);
  EXPECT_EQ(grad.segment(static_cast<Eigen::Index>(off), 3), Eigen::Vector3d::Ones());
}

TEST(Backprop, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = checks::gradient_check(seed);
    EXPECT_LT(r.value_losses, 1e-5) << "seed " << seed;
    EXPECT_LT(r.metric_losses, 1e-4) << "seed " << seed;
  }
}

TEST(Backprop, SinglePointMetricTermOnTinyNet) {
  const SurfNet net = checks::random_tiny_net(12, {2, 4, 3});
  Eigen::Matrix2Xd p(2, 1);
  p << 0.35, 0.6;
  const std::vector<Mat2> g{(Mat2() << 2.0, 0.3, 0.3, 1.5).finished()};
  const double err = checks::grad_error(net, [&](const SurfNet& m, Eigen::VectorXd* grad) {
    return detail::control_terms(m, p, g, nullptr, grad, 1.0, 0.0).metric;
  });
  EXPECT_LT(err, 1e-4);
}

TEST(Backprop, StationaryAtConstantFit) {
  // readout weights zero and output bias equal to c: the net is the constant c
  SurfNet net = SurfNet::random({2, 8, 3}, 5);
  net.weight(1).setZero();
  net.bias(1) = Eigen::Vector3d(1, 2, 3);
  std::mt19937_64 rng(4);
  const Eigen::Matrix2Xd pts = checks::random_points(rng, 10);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
  backprop_scalar(
      net, pts, false,
      [&](const BatchOutputs& out, BatchAdjoints& adj) {
        const Eigen::Matrix3Xd d = out.value.colwise() - Eigen::Vector3d(1, 2, 3);
        adj.value = 2.0 * d;
        return d.squaredNorm();
      },
      grad);
  EXPECT_LT(grad.norm(), 1e-12);
}

TEST(Backprop, NonFiniteGradientIsReported) {
  const SurfNet net = SurfNet::random({2, 4, 3}, 1);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
  Eigen::Matrix2Xd p(2, 1);
  p << 0.5, 0.5;
  try {
    backprop_scalar(
        net, p, false,
        [](const BatchOutputs&, BatchAdjoints& adj) {
          adj.value.setConstant(std::numeric_limits<double>::quiet_NaN());
          return 0.0;
        },
        grad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteGradient);
  }
}

TEST(Adam, FirstStepIsSignStep) {
  Eigen::VectorXd x = Eigen::Vector3d(1, 2, 3);
  const Eigen::VectorXd g = Eigen::Vector3d(0.5, -2.0, 1e-3);
  AdamState s = AdamState::zeros(3);
  const AdamConfig cfg;
  adam_step(x, g, s, cfg);
  for (int i = 0; i < 3; ++i) {
    const double expected = -cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
    EXPECT_NEAR(x[i] - Eigen::Vector3d(1, 2, 3)[i], expected, 1e-15);
  }
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Eigen::VectorXd x = Eigen::Vector3d(1, 2, 3);
  AdamState s = AdamState::zeros(3);
  for (int i = 0; i < 100; ++i) adam_step(x, Eigen::VectorXd::Zero(3), s, {});
  EXPECT_EQ(x, Eigen::Vector3d(1, 2, 3));
}

TEST(Adam, DeterministicAndShapeChecked) {
  Eigen::VectorXd a = Eigen::Vector2d(1, -1);
  Eigen::VectorXd b = a;
  AdamState sa = AdamState::zeros(2);
  AdamState sb = AdamState::zeros(2);
  const Eigen::VectorXd g = Eigen::Vector2d(0.3, 0.7);
  adam_step(a, g, sa, {});
  adam_step(b, g, sb, {});
  EXPECT_EQ(a, b);
  EXPECT_EQ(sa.m, sb.m);
  EXPECT_THROW(adam_step(a, Eigen::VectorXd::Zero(3), sa, {}), Error);
}

TEST(Checkpoint, BitExactRoundTrip) {
  SurfNet net = SurfNet::random({2, 16, 32, 16, 3}, 77, 3.0, 1.0);
  net.set_output_transform(164.0123456789, Vec3(1.0 / 3.0, -2.0 / 7.0, 260.1));
  const std::string text = io::net_to_json(net).dump();
  const SurfNet back = io::net_from_json(io::parse_json(text, "test"));
  EXPECT_EQ(back.layer_dims(), net.layer_dims());
  EXPECT_EQ(back.seed(), 77u);
  EXPECT_EQ(back.output_scale(), net.output_scale());
  EXPECT_EQ(back.output_offset(), net.output_offset());
  ASSERT_EQ(back.params().size(), net.params().size());
  EXPECT_EQ(std::memcmp(back.params().data(), net.params().data(), sizeof(double) * net.num_params()), 0);
  EXPECT_EQ(io::net_to_json(back).dump(), text);
}

TEST(Checkpoint, WeightsAreRowMajor) {
  SurfNet net = SurfNet::zeros({2, 3, 3});
  net.weight(0)(1, 0) = 5.0;  // row 1, column 0
  const auto j = io::net_to_json(net);
  EXPECT_EQ(j["weights"][0][1][0].get<double>(), 5.0);
  EXPECT_EQ(j["weights"][0][0][1].get<double>(), 0.0);
}

TEST(Checkpoint, ShapeErrors) {
  auto j = io::net_to_json(SurfNet::random({2, 4, 3}, 1));
  j["biases"][0] = std::vector<double>{1.0, 2.0};
  EXPECT_THROW(io::net_from_json(j), Error);
}
