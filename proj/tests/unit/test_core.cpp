#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "polyprobe/core/autodiff.hpp"
#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/linalg.hpp"
#include "polyprobe/core/parallel.hpp"
#include "polyprobe/core/rng.hpp"
#include "test_util.hpp"

using namespace polyprobe;
using namespace polyprobe::core;
using testutil::max_rel_error;
using testutil::random_matrix;
using testutil::random_vector;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces the op output to a scalar with fixed random weights, then compares
// the backprop gradient of every input with central differences.
double op_gradient_error(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t seed) {
  Rng rng(seed);
  Tensor weights;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) {
      vars.push_back(tape.constant(x));
    }
    const Tensor& out = tape.value(build(tape, vars));
    weights = Tensor(out.shape(), random_vector(rng, out.size()));
  }
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) {
      vars.push_back(tape.input(x));
    }
    const Var out = build(tape, vars);
    const Var w = tape.constant(weights);
    const Var loss = ops::sum(tape, ops::mul(tape, out, w));
    return std::make_pair(tape.value(loss).item(), std::make_pair(backprop(tape, loss), vars));
  };
  auto [value, rest] = evaluate(inputs);
  auto& [grads, vars] = rest;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](std::span<const double> x) {
      std::vector<Tensor> xs = inputs;
      xs[k] = Tensor(inputs[k].shape(), std::vector<double>(x.begin(), x.end()));
      return evaluate(xs).first;
    };
    const auto fd = finite_difference_gradient(f, inputs[k].values());
    std::vector<double> bp(inputs[k].size(), 0.0);
    if (grads.has(vars[k])) {
      const auto& g = grads.at(vars[k]).values();
      bp.assign(g.begin(), g.end());
    }
    worst = std::max(worst, max_rel_error(bp, fd));
  }
  return worst;
}

}  // namespace

TEST_CASE("cosine similarity basics") {
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 0}) == 1.0);
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  const std::vector<double> u{1, 2, 3};
  const std::vector<double> v{4, 5, 6};
  const double expected = (4.0 + 10.0 + 18.0) / (std::sqrt(14.0) * std::sqrt(77.0));
  CHECK(cosine_similarity(u, v) == doctest::Approx(expected).epsilon(1e-15));
  CHECK_THROWS_AS(cosine_similarity(std::vector<double>{0, 0}, v), Error);
}

TEST_CASE("cosine similarity is symmetric and bounded") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    auto u = random_vector(rng, n);
    auto v = trial % 10 == 0 ? u : random_vector(rng, n);
    const double a = cosine_similarity(u, v);
    CHECK(a == cosine_similarity(v, u));
    CHECK(std::abs(a) <= 1.0 + 1e-12);
  }
}

TEST_CASE("zero norm error code") {
  try {
    cosine_similarity(std::vector<double>{1e-13, 0}, std::vector<double>{1, 0});
    FAIL("expected ZeroNorm");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroNorm);
  }
}

TEST_CASE("pseudo-inverse of simple matrices") {
  CHECK(max_abs_diff(pseudo_inverse(Tensor::identity(3)), Tensor::identity(3)) < 1e-14);
  const Tensor d = Tensor::matrix(2, 2, {2, 0, 0, 0});
  const Tensor dp = pseudo_inverse(d);
  CHECK(dp(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(std::abs(dp(0, 1)) < 1e-15);
  CHECK(std::abs(dp(1, 0)) < 1e-15);
  CHECK(std::abs(dp(1, 1)) < 1e-15);
}

TEST_CASE("pseudo-inverse satisfies the Penrose conditions") {
  Rng rng(11);
  const std::vector<std::pair<std::size_t, std::size_t>> shapes{{4, 2}, {2, 4}, {1, 1}, {7, 7},
                                                                {16, 5}, {33, 64}, {64, 64}};
  for (auto [m, n] : shapes) {
    const Tensor a = random_matrix(rng, m, n);
    const Tensor x = pseudo_inverse(a);
    const PenroseResiduals r = penrose_residuals(a, x);
    CAPTURE(m);
    CAPTURE(n);
    CHECK(r.axa < 1e-8);
    CHECK(r.xax < 1e-8);
    CHECK(r.max() < 1e-8);
  }
  // Rank-deficient: product of thin factors.
  const Tensor low = matmul(random_matrix(rng, 20, 3), random_matrix(rng, 3, 12));
  CHECK(penrose_residuals(low, pseudo_inverse(low)).max() < 1e-8);
}

TEST_CASE("svd reconstructs its input") {
  Rng rng(3);
  const Tensor a = random_matrix(rng, 9, 5);
  const Svd dec = svd(a);
  Tensor us = dec.u;
  for (std::size_t r = 0; r < us.rows(); ++r) {
    for (std::size_t c = 0; c < us.cols(); ++c) {
      us(r, c) *= dec.s[c];
    }
  }
  CHECK(max_abs_diff(matmul(us, transpose(dec.v)), a) < 1e-12);
  for (std::size_t i = 1; i < dec.s.size(); ++i) {
    CHECK(dec.s[i - 1] >= dec.s[i]);
  }
}

TEST_CASE("svd reports non-convergence") {
  Rng rng(5);
  SvdOptions opts;
  opts.max_sweeps = 0;
  try {
    svd(random_matrix(rng, 6, 6), opts);
    FAIL("expected SvdFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SvdFailure);
  }
}

TEST_CASE("backprop on analytic functions") {
  {
    Tape tape;
    const Var x = tape.input(Tensor::scalar(3.0));
    const Var y = ops::mul(tape, x, x);
    CHECK(backprop(tape, y).at(x).item() == 6.0);
  }
  {
    Tape tape;
    const Var x = tape.input(Tensor::vector({0.3, -1.2, 2.0, 0.1}));
    const Var y = ops::sum(tape, ops::softmax_rows(tape, x));
    const Gradients grads = backprop(tape, y);
    for (double g : grads.at(x).values()) {
      CHECK(std::abs(g) < 1e-15);
    }
  }
}

TEST_CASE("backprop rejects a non-scalar seed") {
  Tape tape;
  const Var x = tape.input(Tensor::vector({1.0, 2.0}));
  try {
    backprop(tape, ops::relu(tape, x));
    FAIL("expected NonScalarSeed");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonScalarSeed);
  }
}

TEST_CASE("backprop visits each node once") {
  Tape tape;
  const Var x = tape.input(Tensor::vector({1.0, 2.0}));
  const Var a = ops::add(tape, x, x);
  const Var b = ops::mul(tape, a, x);
  const Var s = ops::sum(tape, b);
  const Gradients g = backprop(tape, s);
  CHECK(g.visited() == tape.size());
  // s = sum(2 x^2) -> ds/dx = 4x
  CHECK(g.at(x)[0] == 4.0);
  CHECK(g.at(x)[1] == 8.0);
}

TEST_CASE("finite differences on analytic functions") {
  auto sq = [](std::span<const double> x) { return x[0] * x[0] + x[1] * x[1]; };
  const auto g = finite_difference_gradient(sq, std::vector<double>{1.0, 2.0});
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-8));
  const auto z = finite_difference_gradient([](std::span<const double>) { return 4.2; }, std::vector<double>{1, 2, 3});
  for (double v : z) {
    CHECK(v == 0.0);
  }
}

TEST_CASE("backprop matches the analytic gradient of a random quadratic") {
  Rng rng(21);
  const std::size_t n = 10;
  const Tensor a = random_matrix(rng, n, n);
  const auto b = random_vector(rng, n);
  const auto x0 = random_vector(rng, n);
  // f(x) = x^T A x + b^T x, grad = (A + A^T) x + b
  Tape tape;
  const Var x = tape.input(Tensor::matrix(1, n, x0));
  const Var ax = ops::matmul(tape, x, tape.constant(a));
  const Var f = ops::add(tape, ops::dot(tape, ax, x), ops::dot(tape, tape.constant(Tensor::matrix(1, n, b)), x));
  const Gradients grads = backprop(tape, f);
  const Tensor& g = grads.at(x);
  const Tensor sym = add(a, transpose(a));
  const auto expected = matvec(sym, x0);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(g[i] - (expected[i] + b[i])) < 1e-12);
  }
  auto fd = finite_difference_gradient(
      [&](std::span<const double> v) {
        double s = dot(b, v);
        const auto av = matvec(a, v);
        return s + dot(v, av);
      },
      x0);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(g[i] - fd[i]) < 1e-6);
  }
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  Rng rng(1234);
  auto mat = [&](std::size_t r, std::size_t c) { return random_matrix(rng, r, c); };
  auto vec = [&](std::size_t n) { return Tensor::vector(random_vector(rng, n)); };
  // Keeps entries away from the relu kink.
  auto off_zero = [&](std::size_t r, std::size_t c) {
    Tensor t = mat(r, c);
    for (double& x : t.values()) {
      x += x >= 0 ? 0.1 : -0.1;
    }
    return t;
  };
  struct Case {
    const char* name;
    Builder build;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases{
      {"add", [](Tape& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); }, {mat(3, 4), mat(3, 4)}},
      {"sub", [](Tape& t, const std::vector<Var>& v) { return ops::sub(t, v[0], v[1]); }, {mat(3, 4), mat(3, 4)}},
      {"mul", [](Tape& t, const std::vector<Var>& v) { return ops::mul(t, v[0], v[1]); }, {mat(3, 4), mat(3, 4)}},
      {"scale", [](Tape& t, const std::vector<Var>& v) { return ops::scale(t, v[0], -2.5); }, {mat(2, 5)}},
      {"matmul", [](Tape& t, const std::vector<Var>& v) { return ops::matmul(t, v[0], v[1]); }, {mat(3, 4), mat(4, 6)}},
      {"reshape", [](Tape& t, const std::vector<Var>& v) { return ops::reshape(t, v[0], {5, 3}); }, {mat(3, 5)}},
      {"transpose", [](Tape& t, const std::vector<Var>& v) { return ops::transpose(t, v[0]); }, {mat(3, 5)}},
      {"add_row_bias", [](Tape& t, const std::vector<Var>& v) { return ops::add_row_bias(t, v[0], v[1]); },
       {mat(4, 3), vec(3)}},
      {"gather_rows", [](Tape& t, const std::vector<Var>& v) { return ops::gather_rows(t, v[0], {2, 0, 2, 4}); },
       {mat(5, 3)}},
      {"row", [](Tape& t, const std::vector<Var>& v) { return ops::row(t, v[0], 1); }, {mat(3, 4)}},
      {"dot", [](Tape& t, const std::vector<Var>& v) { return ops::dot(t, v[0], v[1]); }, {vec(6), vec(6)}},
      {"sum", [](Tape& t, const std::vector<Var>& v) { return ops::sum(t, v[0]); }, {mat(3, 3)}},
      {"sum_squares", [](Tape& t, const std::vector<Var>& v) { return ops::sum_squares(t, v[0]); }, {mat(3, 3)}},
      {"relu", [](Tape& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); }, {off_zero(4, 5)}},
      {"gelu", [](Tape& t, const std::vector<Var>& v) { return ops::gelu(t, v[0]); }, {mat(4, 5)}},
      {"softmax_rows", [](Tape& t, const std::vector<Var>& v) { return ops::softmax_rows(t, v[0]); }, {mat(3, 7)}},
      {"softmax_vector", [](Tape& t, const std::vector<Var>& v) { return ops::softmax_rows(t, v[0]); }, {vec(7)}},
      {"layer_norm",
       [](Tape& t, const std::vector<Var>& v) { return ops::layer_norm(t, v[0], v[1], v[2], 1e-5); },
       {mat(3, 8), vec(8), vec(8)}},
      {"layer_norm_frozen",
       [](Tape& t, const std::vector<Var>& v) { return ops::layer_norm(t, v[0], v[1], v[2], 1e-5, 1.7); },
       {mat(3, 8), vec(8), vec(8)}},
      {"causal_attention",
       [](Tape& t, const std::vector<Var>& v) { return ops::causal_attention(t, v[0], v[1], v[2], 2); },
       {mat(5, 6), mat(5, 6), mat(5, 6)}},
      {"cross_entropy",
       [](Tape& t, const std::vector<Var>& v) { return ops::cross_entropy(t, v[0], {1, 0, 6}); }, {mat(3, 7)}},
      {"column_norms", [](Tape& t, const std::vector<Var>& v) { return ops::column_norms(t, v[0]); }, {mat(5, 4)}},
      {"topk_rows", [](Tape& t, const std::vector<Var>& v) { return ops::topk_rows(t, v[0], 2); }, {mat(3, 6)}},
  };
  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(op_gradient_error(c.build, c.inputs, seed++) < 1e-4);
  }
}

TEST_CASE("ops keep working at dimension 64") {
  Rng rng(99);
  const Builder attn = [](Tape& t, const std::vector<Var>& v) {
    return ops::layer_norm(t, ops::matmul(t, v[0], v[1]), v[2], v[3], 1e-5);
  };
  const std::vector<Tensor> in{random_matrix(rng, 2, 64), random_matrix(rng, 64, 64, 0.2),
                               Tensor::vector(random_vector(rng, 64)), Tensor::vector(random_vector(rng, 64))};
  CHECK(op_gradient_error(attn, in, 5) < 1e-4);
}

TEST_CASE("rng is deterministic and splittable") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  const Rng root(1);
  Rng s1 = root.split("x");
  Rng s2 = root.split("x");
  Rng s3 = root.split("y");
  const auto v1 = s1.next_u64();
  CHECK(v1 == s2.next_u64());
  CHECK(v1 != s3.next_u64());
  Rng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    CHECK(u.below(7) < 7);
  }
}

TEST_CASE("parallel_map preserves order and rethrows") {
  const auto out = parallel_map(50, [](std::size_t i) { return i * i; }, 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i] == i * i);
  }
  CHECK_THROWS_AS(parallel_map(10,
                               [](std::size_t i) {
                                 require(i != 3, ErrorCode::Io, "boom");
                                 return i;
                               },
                               3),
                  Error);
}

TEST_CASE("checkpoint container round-trips bytes exactly") {
  Rng rng(8);
  Checkpoint ck;
  ck.header = {{"kind", "test"}, {"value", 0.1}};
  ck.tensors.emplace_back("a", random_matrix(rng, 3, 4));
  ck.tensors.emplace_back("b", Tensor::vector({1.0 / 3.0, -0.0, 1e-300}));
  ck.tensors.emplace_back("s", Tensor::scalar(2.0));
  const std::string bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.header == ck.header);
  REQUIRE(back.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].first == ck.tensors[i].first);
    CHECK(back.tensors[i].second == ck.tensors[i].second);
  }
  CHECK(encode_checkpoint(back) == bytes);

  auto expect_corrupt = [](std::string_view b) {
    try {
      decode_checkpoint(b);
      FAIL("expected CorruptFile");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::CorruptFile);
    }
  };
  expect_corrupt(std::string_view(bytes).substr(0, bytes.size() - 1));
  expect_corrupt(std::string_view(bytes).substr(0, 10));
  expect_corrupt(bytes + "x");
  std::string bad_magic = bytes;
  bad_magic[0] = 'Q';
  expect_corrupt(bad_magic);
  std::string bad_version = bytes;
  bad_version[8] = 2;
  expect_corrupt(bad_version);

  const auto path = std::filesystem::temp_directory_path() / "polyprobe_test_ckpt.bin";
  save_checkpoint(path, ck);
  CHECK(read_file(path) == bytes);
  std::filesystem::remove(path);
}
