#include <doctest.h>

#include <cmath>
#include <limits>

#include "mmdial/ops.hpp"
#include "oracle.hpp"

using namespace mmdial;

TEST_SUITE("tensor_autograd") {

TEST_CASE("matmul identity and hand example") {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor x = Tensor::matrix(2, 3, {1.5, -2, 3, 4, 5, -6});
  Tensor y = matmul(eye, x);
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == x.data()[i]);

  Tensor c = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {1, 1}));
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(11);
  Tensor a = oracle::random_matrix(3, 4, rng, true), b = oracle::random_matrix(4, 2, rng, true);
  auto loss = [&] { return sum(matmul(a, b)); };
  CHECK(oracle::fd_max_rel_error(loss, a) < 1e-6);
  CHECK(oracle::fd_max_rel_error(loss, b) < 1e-6);
}

TEST_CASE("softmax examples") {
  Tensor s = softmax(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor big = softmax(Tensor::matrix(1, 3, {1000, 0, 0}));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] < 1e-300);

  Tensor r = softmax(Tensor::matrix(1, 3, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(r.data()[i] - std::exp(i + 1.0) / z) < 1e-12);
}

TEST_CASE("softmax rows sum to one under a mask") {
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_matrix(4, 5, rng);
  AttentionMask mask{4, 5, std::vector<std::uint8_t>(20, 1)};
  mask.allowed[2] = mask.allowed[7] = 0;
  Tensor s = softmax(x, &mask);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) total += s.at(r, c);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(s.at(0, 2) == 0.0);
  CHECK(s.at(1, 2) == 0.0);
}

TEST_CASE("layer_norm examples") {
  Tensor gain = Tensor::full({4}, 1.0), bias = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor::matrix(1, 4, {2, 2, 2, 2}), gain, bias);
  for (double v : c.data()) CHECK(v == 0.0);

  std::mt19937_64 rng(5);
  Tensor x = oracle::random_matrix(2, 8, rng);
  Tensor b = Tensor::from({8}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor z = layer_norm(x, Tensor::zeros({8}), b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(z.at(r, j) == b.data()[j]);

  // With eps = 0 the normalized rows have exact unit variance.
  Tensor n = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 0.0);
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mu += n.at(r, j) / 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += (n.at(r, j) - mu) * (n.at(r, j) - mu) / 8.0;
    CHECK(std::abs(mu) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
  // Default eps matches the scalar oracle.
  Tensor d = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  CHECK(oracle::max_abs_diff(oracle::layer_norm(oracle::to_mat(x), std::vector<double>(8, 1.0),
                                                std::vector<double>(8, 0.0), 1e-5),
                             d) < 1e-12);
}

TEST_CASE("backward analytic examples") {
  Tensor x = Tensor::matrix(2, 2, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("gradients accumulate until zeroed") {
  Tensor x = Tensor::matrix(1, 3, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  std::vector<double> once(x.grad().begin(), x.grad().end());
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
  x.zero_grad();
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("non-scalar loss is a contract error") {
  Tensor x = Tensor::matrix(1, 3, {1, 2, 3}, true);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
  current_tape().clear();
}

TEST_CASE("backward visits records newest first") {
  Tensor x = Tensor::matrix(1, 2, {1, 2}, true);
  Tensor a = scale(x, 2.0);
  Tensor b = relu(a);
  Tensor c = sum(b);
  REQUIRE(current_tape().size() == 3);
  std::vector<std::size_t> order;
  current_tape().on_visit = [&](std::size_t i) { order.push_back(i); };
  backward(c);
  current_tape().on_visit = nullptr;
  CHECK(order == std::vector<std::size_t>{2, 1, 0});
  CHECK(current_tape().empty());
}

TEST_CASE("remaining ops match finite differences") {
  std::mt19937_64 rng(21);
  Tensor a = oracle::random_matrix(3, 4, rng, true), b = oracle::random_matrix(3, 4, rng, true);
  Tensor w = oracle::random_matrix(3, 4, rng);  // fixed weights make sum-losses non-trivial
  auto weighted = [&](const Tensor& t) { return sum(mul(t, w)); };

  SUBCASE("add") { CHECK(oracle::fd_max_rel_error([&] { return weighted(add(a, b)); }, a) < 1e-6); }
  SUBCASE("scale") { CHECK(oracle::fd_max_rel_error([&] { return weighted(scale(a, -1.7)); }, a) < 1e-6); }
  SUBCASE("relu") { CHECK(oracle::fd_max_rel_error([&] { return weighted(relu(a)); }, a) < 1e-6); }
  SUBCASE("mul") { CHECK(oracle::fd_max_rel_error([&] { return weighted(mul(a, b)); }, b) < 1e-6); }
  SUBCASE("mean") { CHECK(oracle::fd_max_rel_error([&] { return mean(mul(a, a)); }, a) < 1e-6); }
  SUBCASE("transpose") {
    Tensor wt = oracle::random_matrix(4, 3, rng);
    CHECK(oracle::fd_max_rel_error([&] { return sum(mul(transpose(a), wt)); }, a) < 1e-6);
  }
  SUBCASE("concat rows and cols") {
    Tensor w2 = oracle::random_matrix(6, 4, rng), w3 = oracle::random_matrix(3, 8, rng);
    CHECK(oracle::fd_max_rel_error([&] { return sum(mul(concat_rows({a, b}), w2)); }, b) < 1e-6);
    CHECK(oracle::fd_max_rel_error([&] { return sum(mul(concat_cols({a, b}), w3)); }, a) < 1e-6);
  }
  SUBCASE("slice cols") {
    Tensor w2 = oracle::random_matrix(3, 2, rng);
    CHECK(oracle::fd_max_rel_error([&] { return sum(mul(slice_cols(a, 1, 2), w2)); }, a) < 1e-6);
  }
  SUBCASE("embedding scatter-adds repeated ids") {
    Tensor table = oracle::random_matrix(5, 4, rng, true);
    Tensor w4 = oracle::random_matrix(4, 4, rng);
    const std::vector<int> ids{3, 1, 3, 0};
    CHECK(oracle::fd_max_rel_error([&] { return sum(mul(embedding(table, ids, 2.5), w4)); }, table) < 1e-6);
    table.zero_grad();
    backward(sum(embedding(table, ids)));
    CHECK(table.grad()[3 * 4] == 2.0);
    CHECK(table.grad()[2 * 4] == 0.0);
  }
  SUBCASE("cross entropy with log softmax") {
    CHECK(oracle::fd_max_rel_error([&] { return cross_entropy(a, {2, -1, 0}); }, a) < 1e-6);
    Tensor ce = cross_entropy(a, {2, -1, 0});
    double expect = 0.0;
    for (auto [r, t] : {std::pair<int, int>{0, 2}, {2, 0}}) {
      double z = 0.0;
      for (int c = 0; c < 4; ++c) z += std::exp(a.at(r, c));
      expect -= a.at(r, t) - std::log(z);
    }
    CHECK(ce.item() == doctest::Approx(expect).epsilon(1e-12));
    current_tape().clear();
  }
  SUBCASE("layer norm") {
    Tensor g = Tensor::from({4}, {1.0, 0.5, -0.3, 2.0}, true), bb = Tensor::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    auto loss = [&] { return weighted(layer_norm(a, g, bb)); };
    CHECK(oracle::fd_max_rel_error(loss, a) < 1e-6);
    CHECK(oracle::fd_max_rel_error(loss, g) < 1e-6);
    CHECK(oracle::fd_max_rel_error(loss, bb) < 1e-6);
  }
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tensor table = Tensor::zeros({5, 2});
  CHECK_THROWS_AS(embedding(table, {5}), DataError);
  CHECK_THROWS_AS(embedding(table, {-1}), DataError);
}

TEST_CASE("linearity of backward over addition") {
  std::mt19937_64 rng(8);
  Tensor x = oracle::random_matrix(2, 3, rng, true);
  Tensor w1 = oracle::random_matrix(2, 3, rng), w2 = oracle::random_matrix(2, 3, rng);
  auto f = [&] { return sum(mul(relu(x), w1)); };
  auto g = [&] { return sum(mul(mul(x, x), w2)); };
  backward(add(f(), g()));
  std::vector<double> joint(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(f());
  backward(g());
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(joint[i] - x.grad()[i]) < 1e-14);
}

TEST_CASE("tensors without requires_grad never receive grads") {
  Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  Tensor c = Tensor::matrix(2, 2, {5, 6, 7, 8});
  backward(sum(mul(x, c)));
  CHECK_FALSE(c.requires_grad());
  CHECK(c.impl()->grad.empty());
}

TEST_CASE("no recording under NoGradGuard") {
  Tensor x = Tensor::matrix(1, 2, {1, 2}, true);
  {
    NoGradGuard guard;
    Tensor y = sum(scale(x, 3.0));
    CHECK(current_tape().empty());
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("non-finite results are numeric errors") {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor a = Tensor::matrix(1, 2, {inf, 1.0});
  CHECK_THROWS_AS(add(a, a), NumericError);
  CHECK_THROWS_AS(scale(Tensor::matrix(1, 1, {1e308}), 1e10), NumericError);
}

TEST_CASE("forward results are bit-identical across runs") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor a = oracle::random_matrix(5, 7, rng), b = oracle::random_matrix(7, 3, rng);
    Tensor out = softmax(matmul(a, b));
    return std::vector<double>(out.data().begin(), out.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from({2, 3}, {1, 2, 3}), DimensionError);
  Tensor t = Tensor::zeros({2, 3}, true);
  CHECK(t.numel() == shape_numel(t.shape()));
  CHECK(t.grad().size() == t.numel());
  Tensor s = sum(Tensor::matrix(1, 2, {1, 2}));
  CHECK(s.shape().empty());
  CHECK(s.item() == 3.0);
}

}  // TEST_SUITE
