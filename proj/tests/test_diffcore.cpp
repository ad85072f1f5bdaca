#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "prefgrpo/diffcore.hpp"

using namespace prefgrpo;

namespace {

using Fn = std::function<Tensor(std::span<const Tensor>)>;

Tensor random_tensor(Shape shape, Engine& eng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = u(eng);
  return Tensor(std::move(shape), std::move(d));
}

double fd_max_rel_error(const Fn& f, std::vector<Tensor> inputs) {
  Tape tape;
  std::vector<Tensor> watched;
  for (const auto& t : inputs) watched.push_back(tape.watch(t));
  const auto grads = tape.backward(f(watched));
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto probe = inputs;
        auto d = probe[k].values();
        d[i] += delta;
        probe[k] = Tensor(probe[k].shape(), std::move(d));
        return f(probe).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double an = grads.of(watched[k])[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
  }
  return worst;
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0}, {}), ShapeError);
  EXPECT_THROW(Tensor({1, 1, 1}, {1}), ShapeError);
}

TEST(ForwardOp, Examples) {
  const auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const auto m = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(matmul(eye, m).values(), m.values());
  EXPECT_EQ(square(Tensor::vector({3.0})).values(), std::vector<double>{9.0});
  EXPECT_EQ(mean(Tensor::vector({1, 2, 3, 6})).item(), 3.0);
}

TEST(ForwardOp, Errors) {
  EXPECT_THROW(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ShapeError);
  EXPECT_THROW(matmul(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)), Tensor::matrix(2, 3, std::vector<double>(6, 1.0))),
               ShapeError);
  EXPECT_THROW(ln(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(ln(Tensor::vector({-1.0})), DomainError);
  EXPECT_THROW(exp(Tensor::vector({1000.0})), NumericsError);
}

TEST(Backward, Examples) {
  Tape tape;
  const auto x = tape.watch(Tensor::vector({3.0}));
  EXPECT_DOUBLE_EQ(tape.backward(sum(square(x))).of(x)[0], 6.0);

  Tape t2;
  const auto y = t2.watch(Tensor::vector({1.0, 2.0}));
  const auto g = t2.backward(mean(square(y))).of(y);
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0);
}

TEST(Backward, NonScalarRootIsContractError) {
  Tape tape;
  const auto x = tape.watch(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(square(x)), ContractError);
}

TEST(Backward, ParameterGradientsMatchShapes) {
  ParamStore store = build_mlp(3, {5}, 2, Activation::tanh, 1);
  MlpSpec spec{3, {5}, 2, Activation::tanh};
  Tape tape;
  const auto bound = store.bind(tape);
  const auto out = mlp_forward(bound, spec, Tensor::matrix(4, 3, std::vector<double>(12, 0.3)));
  const auto grads = collect_grads(bound, tape.backward(sum(square(out))));
  for (const auto& [name, t] : store.values()) EXPECT_EQ(grads.at(name).shape(), t.shape()) << name;
}

TEST(GradientCheck, EveryOpKind) {
  Engine eng = make_engine({42});
  // Each op feeds a scalar loss through fixed random weights so every output
  // element contributes a different amount.
  struct Case {
    const char* name;
    std::function<Tensor(std::span<const Tensor>)> op;
    std::vector<Shape> shapes;
    bool positive = false;
  };
  const std::vector<Case> ops = {
      {"add", [](auto in) { return add(in[0], in[1]); }, {{2, 3}, {2, 3}}},
      {"sub", [](auto in) { return sub(in[0], in[1]); }, {{2, 3}, {2, 3}}},
      {"mul", [](auto in) { return mul(in[0], in[1]); }, {{2, 3}, {2, 3}}},
      {"scalar_mul", [](auto in) { return scalar_mul(in[0], -1.7); }, {{4}}},
      {"matmul", [](auto in) { return matmul(in[0], in[1]); }, {{2, 3}, {3, 4}}},
      {"sum", [](auto in) { return sum(in[0]); }, {{3, 2}}},
      {"mean", [](auto in) { return mean(in[0]); }, {{3, 2}}},
      {"square", [](auto in) { return square(in[0]); }, {{5}}},
      {"exp", [](auto in) { return exp(in[0]); }, {{5}}},
      {"ln", [](auto in) { return ln(in[0]); }, {{5}}, true},
      {"tanh", [](auto in) { return tanh(in[0]); }, {{2, 2}}},
      {"silu", [](auto in) { return silu(in[0]); }, {{2, 2}}},
      {"concat", [](auto in) { return concat(in); }, {{2, 1}, {2, 3}}},
      {"broadcast_add", [](auto in) { return broadcast_add(in[0], in[1]); }, {{3, 2}, {2}}},
  };
  for (const auto& c : ops) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) {
        auto t = random_tensor(s, eng);
        if (c.positive) {
          auto d = t.values();
          for (auto& v : d) v = std::abs(v) + 0.1;
          t = Tensor(s, std::move(d));
        }
        inputs.push_back(t);
      }
      Engine weights = make_engine({static_cast<std::uint64_t>(trial), 0x77});
      const auto w = random_tensor(c.op(inputs).shape(), weights, 0.5, 1.5);
      worst = std::max(worst, fd_max_rel_error([&](auto in) { return sum(mul(c.op(in), w)); }, inputs));
    }
    EXPECT_LT(worst, 1e-4) << c.name;
  }
}

TEST(Backward, Linearity) {
  Engine eng = make_engine({5});
  const auto x0 = random_tensor({3}, eng);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    const auto x = tape.watch(x0);
    const auto f = sum(tanh(x));
    const auto g = sum(square(x));
    return tape.backward(add(scalar_mul(f, a), scalar_mul(g, b))).of(x).values();
  };
  const auto gf = grad_of(1, 0), gg = grad_of(0, 1), both = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(both[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-12);
}

TEST(Adam, FirstStepMovesByLr) {
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  adam_step(store, {{"p", Tensor::scalar(1.0)}}, AdamConfig{0.1});
  EXPECT_NEAR(store.get("p").item(), 0.9, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamStore store;
  store.add("p", Tensor::vector({1.0, -2.0}));
  adam_step(store, {{"p", Tensor::zeros({2})}}, AdamConfig{0.1});
  EXPECT_EQ(store.get("p").values(), (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, DeterministicAndStrict) {
  auto run = [] {
    ParamStore s = build_mlp(2, {4}, 1, Activation::silu, 3);
    TensorMap g;
    for (const auto& [n, t] : s.values()) g.emplace(n, Tensor::filled(t.shape(), 0.25));
    adam_step(s, g, AdamConfig{});
    adam_step(s, g, AdamConfig{});
    return s;
  };
  EXPECT_TRUE(run() == run());
  ParamStore s = build_mlp(2, {4}, 1, Activation::silu, 3);
  EXPECT_THROW(adam_step(s, {}, AdamConfig{}), ContractError);
}

TEST(ParamStore, NamesUniqueShapesFixed) {
  ParamStore s;
  s.add("w", Tensor::vector({1, 2}));
  EXPECT_THROW(s.add("w", Tensor::vector({1, 2})), ContractError);
  EXPECT_THROW(s.set("w", Tensor::vector({1, 2, 3})), ShapeError);
}

TEST(BuildMlp, CountAndSeeding) {
  // 3*16+16 + 16*16+16 + 16*2+2
  constexpr std::size_t expected = 3 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2;
  static_assert(expected == 370);
  EXPECT_EQ(build_mlp(3, {16, 16}, 2, Activation::tanh, 7).count(), expected);
  EXPECT_TRUE(build_mlp(3, {16, 16}, 2, Activation::tanh, 7) == build_mlp(3, {16, 16}, 2, Activation::tanh, 7));
  EXPECT_FALSE(build_mlp(3, {16, 16}, 2, Activation::tanh, 7) == build_mlp(3, {16, 16}, 2, Activation::tanh, 8));
}

TEST(Checkpoint, JsonRoundTripIsBitwise) {
  const auto s = build_mlp(3, {8}, 2, Activation::silu, 11);
  const auto text = params_to_json(s).dump();
  EXPECT_TRUE(params_from_json(nlohmann::json::parse(text)) == s);
  EXPECT_THROW(params_from_json(nlohmann::json::parse(R"({"w": {"shape": [2], "data": [1]}})")), CheckpointError);
}
