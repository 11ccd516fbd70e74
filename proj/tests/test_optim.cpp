#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "metavl/checkpoint.hpp"
#include "metavl/optim.hpp"
#include "metavl/rng.hpp"

using namespace metavl;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "metavl_test_optim";
  fs::create_directories(dir);
  return dir / name;
}

// Tiny regression problem: w [3, 2], b [2].
struct Toy {
  std::vector<NamedTensor<double>> params;
  Tensor<double> x;
  std::vector<std::int32_t> y;

  explicit Toy(std::uint64_t seed) {
    Rng rng(seed);
    auto rnd = [&](Shape s, bool rg) {
      std::vector<double> v(shape_numel(s));
      for (auto& e : v) e = normal(rng);
      return Tensor<double>(s, v, rg);
    };
    params.emplace_back("w", rnd({3, 2}, true));
    params.emplace_back("b", rnd({2}, true));
    x = rnd({4, 3}, false);
    y = {0, 1, 1, 0};
  }

  Tensor<double> loss() const {
    std::vector<bool> mask(4, true);
    return masked_cross_entropy(add_bias(matmul(x, params[0].second), params[1].second), y, mask);
  }
};

double train(Toy& toy, Adam<double>& opt, int steps) {
  double last = 0;
  for (int i = 0; i < steps; ++i) {
    opt.zero_grad();
    auto l = toy.loss();
    last = l.item();
    l.backward();
    opt.step();
  }
  return last;
}

}  // namespace

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  auto p = Tensor<double>::scalar(0.0, true);
  Adam<double> opt;
  opt.add_group({"g", {{"p", p}}, 0.1, false});
  p.mutable_grad()[0] = 1.0;
  opt.step();
  const double g = 1.0;
  EXPECT_LT(std::abs(p.item() + 0.1 * g / (std::abs(g) + 1e-8)), 1e-9);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = Tensor<double>({3}, {1.0, -2.0, 0.5}, true);
  Adam<double> opt;
  opt.add_group({"g", {{"p", p}}, 0.1, false});
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    p.mutable_grad();
    opt.step();
  }
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
  EXPECT_EQ(p.data()[2], 0.5);
}

TEST(Adam, FrozenGroupIsBitwiseUnchanged) {
  Toy toy(3);
  auto w_before = std::vector<double>(toy.params[0].second.data().begin(), toy.params[0].second.data().end());
  Adam<double> opt;
  opt.add_group({"frozen", {toy.params[0]}, 0.1, true});
  opt.add_group({"live", {toy.params[1]}, 0.1, false});
  train(toy, opt, 20);
  // The frozen weight did receive gradients, the optimizer just skipped it.
  EXPECT_TRUE(toy.params[0].second.has_grad());
  EXPECT_EQ(std::vector<double>(toy.params[0].second.data().begin(), toy.params[0].second.data().end()), w_before);
  EXPECT_NE(toy.params[1].second.data()[0], Toy(3).params[1].second.data()[0]);
}

TEST(Adam, MissingGradientThrows) {
  auto p = Tensor<double>({2}, {1, 2}, true);
  Adam<double> opt;
  opt.add_group({"g", {{"p", p}}, 0.1, false});
  EXPECT_THROW(opt.step(), Error);
}

TEST(Adam, GroupNamesUniqueAndRatesPositive) {
  auto p = Tensor<double>({2}, {1, 2}, true);
  auto q = Tensor<double>({2}, {1, 2}, true);
  Adam<double> opt;
  opt.add_group({"g", {{"p", p}}, 0.1, false});
  EXPECT_THROW(opt.add_group({"g", {{"q", q}}, 0.1, false}), ConfigError);
  EXPECT_THROW(opt.add_group({"h", {{"q", q}}, 0.0, false}), ConfigError);
}

TEST(Adam, PerGroupLearningRates) {
  auto a = Tensor<double>::scalar(0.0, true);
  auto b = Tensor<double>::scalar(0.0, true);
  Adam<double> opt;
  opt.add_group({"fast", {{"a", a}}, 0.1, false});
  opt.add_group({"slow", {{"b", b}}, 0.001, false});
  a.mutable_grad()[0] = 2.0;
  b.mutable_grad()[0] = 2.0;
  opt.step();
  EXPECT_NEAR(a.item(), -0.1, 1e-8);
  EXPECT_NEAR(b.item(), -0.001, 1e-10);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Toy toy(5);
  Adam<double> opt;
  opt.add_group({"all", toy.params, 0.05, false});
  train(toy, opt, 3);
  auto ck = capture_checkpoint("toy:v1", toy.params, &opt);
  ck.metadata["stage"] = "unit";
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(ck, path);
  auto back = load_checkpoint<double>(path);
  EXPECT_EQ(back.fingerprint, "toy:v1");
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.metadata.at("stage"), "unit");
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape(), ck.tensors[i].second.shape());
    EXPECT_EQ(0, std::memcmp(back.tensors[i].second.data().data(), ck.tensors[i].second.data().data(),
                             ck.tensors[i].second.numel() * sizeof(double)));
  }
}

TEST(Checkpoint, RejectsMismatchedFingerprintAndShape) {
  Toy toy(5);
  auto ck = capture_checkpoint("toy:v1", toy.params);
  EXPECT_THROW(restore_checkpoint(ck, "toy:v2", toy.params), CheckpointError);

  std::vector<NamedTensor<double>> wider{{"w", Tensor<double>::zeros({3, 3}, true)},
                                         {"b", Tensor<double>::zeros({3}, true)}};
  try {
    restore_checkpoint(ck, "toy:v1", wider);
    FAIL() << "shape mismatch accepted";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.field(), "tensor 'w'.shape");
  }
  EXPECT_EQ(wider[1].second.data()[0], 0.0);
}

TEST(Checkpoint, CorruptionNamesTheField) {
  Toy toy(5);
  const auto path = temp_path("corrupt.ckpt");
  save_checkpoint(capture_checkpoint("toy:v1", toy.params), path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  auto field_of = [&]() -> std::string {
    try {
      load_checkpoint<double>(path);
    } catch (const CheckpointError& e) {
      return e.field();
    }
    return "";
  };

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  EXPECT_EQ(field_of(), "magic");

  auto flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x40;
  write(flipped);
  EXPECT_EQ(field_of(), "checksum");

  write(bytes.substr(0, 40));
  EXPECT_NE(field_of(), "");

  write(bytes);
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);
  EXPECT_NO_THROW(load_checkpoint<double>(path));
}

TEST(Checkpoint, ResumeMatchesUninterrupted) {
  Toy straight(9);
  Adam<double> opt_a;
  opt_a.add_group({"all", straight.params, 0.05, false});
  train(straight, opt_a, 10);
  const double final_straight = straight.loss().item();

  Toy first(9);
  Adam<double> opt_b;
  opt_b.add_group({"all", first.params, 0.05, false});
  train(first, opt_b, 5);
  const auto path = temp_path("resume.ckpt");
  save_checkpoint(capture_checkpoint("toy:v1", first.params, &opt_b), path);

  Toy resumed(123);
  Adam<double> opt_c;
  opt_c.add_group({"all", resumed.params, 0.05, false});
  restore_checkpoint(load_checkpoint<double>(path), "toy:v1", resumed.params, &opt_c);
  resumed.x = first.x;
  train(resumed, opt_c, 5);
  EXPECT_EQ(opt_c.step_count(), 10u);
  EXPECT_EQ(resumed.loss().item(), final_straight);
}
