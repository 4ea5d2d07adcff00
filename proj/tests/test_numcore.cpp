#include "conda_dyn/binio.hpp"
#include "conda_dyn/numcore.hpp"
#include "conda_dyn/parallel.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <set>

using namespace conda_dyn;

namespace {

// Reference xoshiro256** seeded by splitmix64, written from the published
// recurrences.
struct RefXoshiro {
  std::uint64_t s[4];
  explicit RefXoshiro(std::uint64_t seed) {
    for (auto& v : s) {
      seed += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = seed;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      v = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t r = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return r;
  }
};

} // namespace

TEST(Rng, MatchesReferenceGenerator) {
  for (std::uint64_t seed : {0ULL, 1ULL, 12345ULL}) {
    Rng rng(seed);
    RefXoshiro ref(seed);
    for (int i = 0; i < 100; ++i) {
      ASSERT_EQ(rng.next_u64(), ref.next());
    }
  }
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  Rng a = Rng::stream(7, "diffusion");
  Rng b = Rng::stream(7, "diffusion");
  Rng c = Rng::stream(7, "contrastive");
  Rng d = Rng::stream(8, "diffusion");
  int equal_c = 0;
  int equal_d = 0;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    equal_c += va == c.next_u64();
    equal_d += va == d.next_u64();
  }
  EXPECT_EQ(equal_c, 0);
  EXPECT_EQ(equal_d, 0);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(3);
  const int n = 200000;
  double su = 0.0;
  double sn = 0.0;
  double sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
  }
  EXPECT_NEAR(su / n, 0.5, 5e-3);
  EXPECT_NEAR(sn / n, 0.0, 1e-2);
  EXPECT_NEAR(sn2 / n, 1.0, 1.5e-2);
}

TEST(Rng, IndexCoversRangeAndShuffleIsPermutation) {
  Rng rng(11);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto k = rng.index(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
  std::vector<int> items(50);
  for (int i = 0; i < 50; ++i) {
    items[i] = i;
  }
  rng.shuffle(std::span(items));
  std::vector<int> sorted = items;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(sorted[i], i);
  }
}

TEST(Hash, FnvKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Matmul, ShapeAndFiniteChecks) {
  Matrix a = Matrix::Ones(2, 3);
  Matrix b = Matrix::Ones(3, 4);
  EXPECT_TRUE(matmul(a, b).isApprox(Matrix::Constant(2, 4, 3.0)));
  EXPECT_THROW(matmul(a, a), ShapeError);
  a(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(matmul(a, b), NumericError);
}

TEST(GradCheck, AcceptsCorrectAndRejectsWrongGradient) {
  Params params{{"w", Matrix::Random(3, 2)}, {"b", Matrix::Random(1, 2)}};
  const Matrix target = Matrix::Random(3, 2);
  auto loss = [&](const Params& p, Grads* g, double scale) {
    const Matrix r = p[0].value - target;
    const double sb = p[1].value.array().sin().sum();
    if (g) {
      (*g)[0] += scale * 2.0 * r;
      (*g)[1] += p[1].value.array().cos().matrix();
    }
    return r.squaredNorm() + sb;
  };
  EXPECT_LE(grad_check([&](const Params& p, Grads* g) { return loss(p, g, 1.0); }, params), 1e-7);
  EXPECT_GT(grad_check([&](const Params& p, Grads* g) { return loss(p, g, 1.1); }, params), 1e-2);
  EXPECT_THROW(grad_check([&](const Params& p, Grads* g) { return loss(p, g, 1.0); }, params, {1e-1}),
               ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Params params{{"w", Matrix::Zero(2, 2)}};
  Grads grads{Matrix(2, 2)};
  grads[0] << 1.0, -2.0, 0.5, 3.0;
  AdamState state(AdamConfig{.lr = 0.1});
  adam_step(params, grads, state);
  // Bias correction makes the first update lr * g / (|g| + eps).
  for (int i = 0; i < 4; ++i) {
    const double g = grads[0].data()[i];
    EXPECT_NEAR(params[0].value.data()[i], -0.1 * g / (std::abs(g) + 1e-8), 1e-12);
  }
  EXPECT_EQ(state.step(), 1);
  grads[0](0, 0) = std::nan("");
  EXPECT_THROW(adam_step(params, grads, state), NumericError);
  Grads wrong{Matrix::Zero(3, 2)};
  EXPECT_THROW(adam_step(params, wrong, state), ShapeError);
}

TEST(BinaryIo, RoundTripAndCorruption) {
  BinaryWriter w("TESTMAGI");
  w.u32(7);
  w.f64(-1.25);
  w.str("hello");
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  w.matrix(m);
  w.params({{"p", Matrix::Identity(2, 2)}});

  BinaryReader r(w.bytes(), "TESTMAGI");
  EXPECT_EQ(r.u32(), 7u);
  EXPECT_EQ(r.f64(), -1.25);
  EXPECT_EQ(r.str(), "hello");
  EXPECT_EQ(r.matrix(), m);
  const Params p = r.params();
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].name, "p");
  EXPECT_EQ(p[0].value, Matrix::Identity(2, 2));
  EXPECT_NO_THROW(r.expect_end());

  EXPECT_THROW(BinaryReader(w.bytes(), "OTHERMAG"), FormatError);
  std::vector<std::uint8_t> truncated(w.bytes().begin(), w.bytes().end() - 5);
  BinaryReader t(truncated, "TESTMAGI");
  t.u32();
  t.f64();
  t.str();
  t.matrix();
  try {
    t.params();
    FAIL() << "truncated params parsed";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 12u);
  }
}

TEST(Parallel, EveryIndexRunsOnceAndExceptionsPropagate) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) {
    EXPECT_EQ(h.load(), 1);
  }
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 3) {
                   throw InputError("boom");
                 }
               }),
               InputError);
  EXPECT_GE(worker_count(), 1u);
}
