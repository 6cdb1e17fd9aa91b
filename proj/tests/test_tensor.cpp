#include <cmath>

#include "doctest.h"
#include "fada/gradcheck.hpp"
#include "fada/tensor.hpp"

using namespace fada;

TEST_CASE("relu on [-1, 0, 2]") {
  Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  Tensor y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from({3}, {0.0, 0.0, 0.0});
  Tensor y = softmax(x, 0);
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows are nonnegative and sum to 1 within 1e-12") {
  RngStream rng(7);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> d(4 * 6);
    for (double& v : d) v = rng.uniform(-30.0, 30.0);
    Tensor x = Tensor::from({4, 6}, d);
    Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        double v = y.data()[r * 6 + c];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("conv2d all-ones 3x3 input with 2x2 ones kernel gives 2x2 of fours") {
  // Hand enumeration: each window covers four ones.
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.data()) CHECK(v == 4.0);
}

TEST_CASE("backward of sum(x*x) doubles the input") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  RecordScope rec;
  Tensor loss = sum(mul(x, x));
  rec.graph().backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("gradient of loss w.r.t. itself is 1 and grads accumulate until zeroed") {
  Tensor x = Tensor::from({1}, {2.0}, true);
  {
    RecordScope rec;
    Tensor loss = sum(mul(x, x));
    rec.graph().backward(loss);
    rec.graph().backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(8.0));  // 4 + 4
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("matmul chain gradient matches central finite differences below 1e-5") {
  RngStream rng(11);
  auto draw = [&](Shape s) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) v = rng.uniform(-1.0, 1.0);
    return Tensor::from(s, d, true);
  };
  Tensor a = draw({3, 4});
  Tensor b = draw({4, 5});
  Tensor c = draw({5, 2});
  std::vector<Tensor> params = {a, b, c};
  auto loss = [&] { return sum(matmul(matmul(a, b), c)); };
  GradCheckResult r = finite_difference_check(params, loss);
  CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("sgd step definitions") {
  SUBCASE("theta=5, g=2, lr=0.1 -> 4.8") {
    Tensor t = Tensor::from({1}, {5.0}, true);
    t.storage()->grad = {2.0};
    SgdOptimizer opt({0.1, 0.0});
    std::vector<Tensor> ps = {t};
    opt.step(ps);
    CHECK(t.data()[0] == doctest::Approx(4.8).epsilon(1e-15));
  }
  SUBCASE("zero gradient is a fixed point") {
    Tensor t = Tensor::from({1}, {5.0}, true);
    t.storage()->grad = {0.0};
    SgdOptimizer opt({0.1, 0.0});
    std::vector<Tensor> ps = {t};
    opt.step(ps);
    CHECK(t.data()[0] == 5.0);
  }
  SUBCASE("momentum 0.9, two unit gradients at lr 1: steps of 1 then 1.9") {
    Tensor t = Tensor::from({1}, {0.0}, true);
    SgdOptimizer opt({1.0, 0.9});
    std::vector<Tensor> ps = {t};
    t.storage()->grad = {1.0};
    opt.step(ps);
    CHECK(t.data()[0] == doctest::Approx(-1.0));
    t.storage()->grad = {1.0};
    opt.step(ps);
    CHECK(t.data()[0] == doctest::Approx(-2.9));
  }
}

TEST_CASE("batchnorm training output is standardized before affine terms") {
  RngStream rng(3);
  std::vector<double> d(16 * 5);
  for (double& v : d) v = rng.uniform(-3.0, 7.0);
  Tensor x = Tensor::from({16, 5}, d);
  Tensor gamma = Tensor::full({5}, 1.0);
  Tensor beta = Tensor::zeros({5});
  std::vector<double> rm(5, 0.0), rv(5, 1.0);
  Tensor y = batchnorm_train(x, gamma, beta, rm, rv, 0.9, 0.0);
  for (std::size_t c = 0; c < 5; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < 16; ++i) mu += y.data()[i * 5 + c];
    mu /= 16.0;
    CHECK(std::fabs(mu) < 1e-9);
    double var = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      double v = y.data()[i * 5 + c] - mu;
      var += v * v;
    }
    var /= 16.0;
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batchnorm rejects batch of one in training mode") {
  Tensor x = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  CHECK_THROWS_AS(batchnorm_train(x, gamma, beta, rm, rv, 0.9, 1e-5), ShapeError);
}

TEST_CASE("dropout with p=0 is the identity") {
  RngStream rng(5);
  Tensor x = Tensor::from({4}, {1.0, -2.0, 3.0, -4.0});
  Tensor y = dropout(x, 0.0, rng);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("dropout preserves expectation to within 1% over 1e5 draws") {
  RngStream rng(17);
  const double p = 0.4;
  const std::size_t n = 100000;
  Tensor x = Tensor::full({n}, 1.0);
  Tensor y = dropout(x, p, rng);
  double m = 0.0;
  for (double v : y.data()) m += v;
  m /= static_cast<double>(n);
  CHECK(std::fabs(m - 1.0) < 0.01);
}

TEST_CASE("identical seeds and op sequences produce bit-identical results") {
  auto run = [](std::uint64_t seed) {
    RngStream rng(seed);
    Tensor w = Tensor::randn_param({8, 8}, 0.5, rng);
    Tensor x = Tensor::randn_param({4, 8}, 1.0, rng);
    Tensor h = relu(matmul(x, w));
    Tensor d = dropout(h, 0.5, rng);
    return std::vector<double>(d.data().begin(), d.data().end());
  };
  auto a = run(123);
  auto b = run(123);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("non-finite forward output raises a numeric fault") {
  Tensor x = Tensor::from({2}, {-1.0, 0.5});
  CHECK_THROWS_AS(log(x), NumericFault);
}

TEST_CASE("backward rejects non-scalar losses and cleared graphs") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  RecordScope rec;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(rec.graph().backward(y), ShapeError);
  Tensor loss = sum(y);
  rec.graph().clear();
  CHECK_THROWS_AS(rec.graph().backward(loss), std::logic_error);
}

TEST_CASE("maxpool ties route gradient to the first maximal element") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 1.0, 0.0, 0.0}, true);
  RecordScope rec;
  Tensor y = maxpool2d(x, 2, 1);
  Tensor loss = sum(y);
  rec.graph().backward(loss);
  auto g = x.grad();
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("full primitive gradient suite stays under 1e-4") {
  auto reports = run_gradient_suite(1e-4, 5);  // acceptance runs the full 20
  for (const auto& r : reports) {
    INFO(r.op, " worst rel err ", r.worst_rel_err);
    CHECK(r.pass);
  }
}
