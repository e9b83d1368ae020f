#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "groundgen/checkpoint.hpp"
#include "groundgen/errors.hpp"
#include "groundgen/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace groundgen {
namespace {

using testing::random_sample;
using testing::TempDir;
using testing::tiny_config;

// Scalar count of the concatenation baseline, counted layer by layer.
TEST(ModelConfig, KeyValueRoundTripAndValidation) {
  ModelConfig c = tiny_config(GroundingMode::DoHA, 7);
  c.position_init = PositionInit::Sinusoidal;
  const auto back = ModelConfig::from_kv(c.to_kv());
  EXPECT_EQ(back.to_kv().values(), c.to_kv().values());
  ModelConfig bad = c;
  bad.num_heads = 3;  // 16 is not divisible by 3
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.max_context_len = bad.max_source_len + 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(parse_grounding_mode("fusion"), ConfigError);
  EXPECT_EQ(parse_grounding_mode(to_string(GroundingMode::CoDR)), GroundingMode::CoDR);
}

TEST(ParameterCount, ConcatMatchesTheLayerByLayerCount) {
  Rng rng(21);
  for (int i = 0; i < 20; ++i) {
    const auto c = testing::random_model_config(rng, GroundingMode::Concat);
    EXPECT_EQ(GroundedModel<double>(c).parameter_count(), oracle::concat_parameter_count(c));
  }
}

TEST(ParameterCount, CoDRAddsNothingAndDoHAAddsOneAttentionPerDecoderLayer) {
  Rng rng(22);
  for (int i = 0; i < 20; ++i) {
    auto c = testing::random_model_config(rng, GroundingMode::Concat);
    const std::size_t base = GroundedModel<double>(c).parameter_count();
    c.grounding_mode = GroundingMode::CoDR;
    EXPECT_EQ(GroundedModel<double>(c).parameter_count(), base);
    c.grounding_mode = GroundingMode::DoHA;
    const std::size_t d = c.d_model;
    EXPECT_EQ(GroundedModel<double>(c).parameter_count(), base + c.num_decoder_layers * (4 * d * d + 4 * d));
  }
}

TEST(ParameterStore, ConcatAndCoDRShareNamesShapesAndValues) {
  const GroundedModel<double> a(tiny_config(GroundingMode::Concat, 4));
  const GroundedModel<double> b(tiny_config(GroundingMode::CoDR, 4));
  const auto& ea = a.parameters().entries();
  const auto& eb = b.parameters().entries();
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    EXPECT_EQ(ea[i].name, eb[i].name);
    EXPECT_EQ(ea[i].tensor.storage(), eb[i].tensor.storage()) << ea[i].name;
  }
}

TEST(ParameterStore, SameSeedIsIdenticalAndDifferentSeedIsNot) {
  const GroundedModel<double> a(tiny_config(GroundingMode::DoHA, 9));
  const GroundedModel<double> b(tiny_config(GroundingMode::DoHA, 9));
  const GroundedModel<double> c(tiny_config(GroundingMode::DoHA, 10));
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].storage(), b.parameters()[i].storage());
    any_diff |= a.parameters()[i].storage() != c.parameters()[i].storage();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Encoder, CoDROutputLengthIsTwoContextsPlusDocument) {
  Rng rng(31);
  const GroundedModel<double> m(tiny_config(GroundingMode::CoDR, 2));
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = 1 + rng.index(16);
    const std::size_t d = 1 + rng.index(48 - c);
    const auto s = random_sample(rng, 50, c, d, 3);
    Graph<double> g(false);
    auto ctx = m.eval_context();
    const auto enc = m.encode(g, std::span<const PreparedSample>(&s, 1), ctx);
    EXPECT_EQ(enc.source_spans[0].length, 2 * c + d);
    EXPECT_EQ(enc.source_rows(0).rows(), 2 * c + d);
  }
}

TEST(Encoder, PackedBatchMatchesSingleSampleEncoding) {
  Rng rng(32);
  for (auto mode : {GroundingMode::Concat, GroundingMode::CoDR, GroundingMode::DoHA}) {
    const GroundedModel<double> m(tiny_config(mode, 3));
    std::vector<PreparedSample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_sample(rng, 50, 1 + rng.index(8), 1 + rng.index(10), 2));
    Graph<double> g(false);
    auto ctx = m.eval_context();
    const auto packed = m.encode(g, batch, ctx);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Graph<double> g1(false);
      const auto one = m.encode(g1, std::span<const PreparedSample>(&batch[i], 1), ctx);
      const auto a = packed.source_rows(i), b = one.source_rows(0);
      ASSERT_EQ(a.shape(), b.shape());
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
      if (mode == GroundingMode::DoHA) {
        const auto ad = packed.document_rows(i), bd = one.document_rows(0);
        for (std::size_t k = 0; k < ad.size(); ++k) EXPECT_NEAR(ad[k], bd[k], 1e-12);
      }
    }
  }
}

TEST(Encoder, ConcatWithoutDocumentEqualsTheContextEncoding) {
  // Concat(c, empty) and the first |c| CoDR rows are both Encoder(c).
  Rng rng(33);
  const GroundedModel<double> concat(tiny_config(GroundingMode::Concat, 5));
  const GroundedModel<double> codr(tiny_config(GroundingMode::CoDR, 5));
  for (int i = 0; i < 10; ++i) {
    auto s = random_sample(rng, 50, 1 + rng.index(12), 1 + rng.index(12), 2);
    Graph<double> g(false);
    auto ctx = concat.eval_context();
    const auto full = codr.encode(g, std::span<const PreparedSample>(&s, 1), ctx).source_rows(0);
    PreparedSample bare = s;
    bare.document.clear();
    const auto alone = concat.encode(g, std::span<const PreparedSample>(&bare, 1), ctx).source_rows(0);
    ASSERT_EQ(alone.rows(), s.context.size());
    for (std::size_t k = 0; k < alone.size(); ++k) EXPECT_NEAR(alone[k], full[k], 1e-12);
  }
}

TEST(Forward, LogitsHaveOneRowPerPrefixTokenAndSoftmaxRowsNormalize) {
  Rng rng(34);
  for (auto mode : {GroundingMode::Concat, GroundingMode::CoDR, GroundingMode::DoHA}) {
    const GroundedModel<double> m(tiny_config(mode, 6));
    const auto s = random_sample(rng, 50, 5, 9, 4);
    const auto prefix = decoder_input(s);
    Graph<double> g(false);
    auto ctx = m.eval_context();
    const auto logits = m.forward(g, s, prefix, ctx).value();
    ASSERT_EQ(logits.rows(), prefix.size());
    ASSERT_EQ(logits.cols(), 50u);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      double mx = -1e300, sum = 0;
      for (std::size_t c = 0; c < logits.cols(); ++c) mx = std::max(mx, logits.at(r, c));
      for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits.at(r, c) - mx);
      double total = 0;
      for (std::size_t c = 0; c < logits.cols(); ++c) total += std::exp(logits.at(r, c) - mx) / sum;
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Forward, TeacherForcingViewsShiftTheTarget) {
  const PreparedSample s{{7}, {8}, {10, 11, 12}};
  EXPECT_EQ(decoder_input(s), (std::vector<TokenId>{kBos, 10, 11, 12}));
  EXPECT_EQ(decoder_labels(s), (std::vector<TokenId>{10, 11, 12, kEos}));
}

TEST(Forward, OverlongInputsAreRejected) {
  Rng rng(35);
  const GroundedModel<double> m(tiny_config(GroundingMode::Concat, 6));
  Graph<double> g(false);
  auto ctx = m.eval_context();
  const auto s = random_sample(rng, 50, 10, 39, 2);  // 49 > max_source_len 48
  EXPECT_THROW(m.encode(g, std::span<const PreparedSample>(&s, 1), ctx), InputError);
  auto oov = random_sample(rng, 50, 3, 3, 2);
  oov.context[1] = 50;
  EXPECT_THROW(m.encode(g, std::span<const PreparedSample>(&oov, 1), ctx), VocabularyError);
}

TEST(Loss, GradientsMatchFiniteDifferencesInEveryMode) {
  for (auto mode : {GroundingMode::Concat, GroundingMode::CoDR, GroundingMode::DoHA}) {
    for (std::uint64_t seed : {1u, 2u}) {
      GroundedModel<double> m(tiny_config(mode, seed));
      Rng rng(100 + seed);
      std::vector<PreparedSample> batch{random_sample(rng, 50, 4, 6, 3), random_sample(rng, 50, 3, 5, 2)};
      const auto r = testing::check_model_gradients(m, batch, 6);
      EXPECT_LT(r.max_rel_error, 1e-4) << to_string(mode) << " worst " << r.worst;
      EXPECT_GT(r.checked, 100u);
    }
  }
}

TEST(Loss, InitialLossIsNearUniform) {
  Rng rng(36);
  for (auto mode : {GroundingMode::Concat, GroundingMode::CoDR, GroundingMode::DoHA}) {
    const GroundedModel<double> m(tiny_config(mode, 8));
    std::vector<PreparedSample> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(random_sample(rng, 50, 6, 10, 6));
    Graph<double> g(false);
    auto ctx = m.eval_context();
    const double loss = m.loss(g, batch, ctx).value()[0];
    EXPECT_NEAR(loss, std::log(50.0), 0.05 * std::log(50.0)) << to_string(mode);
  }
}

template <typename T>
void expect_bit_identical(const GroundedModel<T>& a, const GroundedModel<T>& b) {
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto x = a.parameters()[i].data(), y = b.parameters()[i].data();
    ASSERT_EQ(x.size(), y.size());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0) << a.parameters().name(i);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  for (auto mode : {GroundingMode::Concat, GroundingMode::CoDR, GroundingMode::DoHA}) {
    auto cfg = tiny_config(mode, 12);
    const GroundedModel<double> m(cfg);
    const auto path = dir / ("f64_" + to_string(mode));
    save_checkpoint(path, m);
    const auto back = load_checkpoint<double>(path);
    EXPECT_EQ(back.config().to_kv().values(), cfg.to_kv().values());
    expect_bit_identical(m, back);

    cfg.precision = Precision::F32;
    const GroundedModel<float> f(cfg);
    save_checkpoint(dir / ("f32_" + to_string(mode)), f);
    expect_bit_identical(f, load_checkpoint<float>(dir / ("f32_" + to_string(mode))));
  }
}

TEST(Checkpoint, VocabularyAndExtrasAreStored) {
  TempDir dir;
  const GroundedModel<double> m(tiny_config(GroundingMode::Concat, 1));
  const Vocab v = Vocab::from_tokens({"alpha", "beta"});
  KeyValueConfig extra;
  extra.set("step", "17");
  save_checkpoint(dir / "ck", m, &v, extra);
  const auto manifest = read_checkpoint_manifest(dir / "ck");
  EXPECT_TRUE(manifest.has_vocab);
  EXPECT_EQ(manifest.extra.get_int("step", 0), 17);
  EXPECT_EQ(manifest.params.size(), m.parameters().size());
  EXPECT_EQ(load_checkpoint_vocab(dir / "ck"), v);
}

TEST(Checkpoint, ConcatLoadsIntoCoDRUnchanged) {
  TempDir dir;
  GroundedModel<double> concat(tiny_config(GroundingMode::Concat, 13));
  for (auto& e : concat.parameters().entries()) e.tensor[0] += 0.5;  // differ from a fresh init
  save_checkpoint(dir / "c", concat);
  const auto codr = load_checkpoint<double>(dir / "c", GroundingMode::CoDR);
  EXPECT_EQ(codr.mode(), GroundingMode::CoDR);
  expect_bit_identical(concat, codr);
}

TEST(Checkpoint, ConcatLoadsIntoDoHAWithDocumentAttentionCopiedFromContextAttention) {
  TempDir dir;
  GroundedModel<double> concat(tiny_config(GroundingMode::Concat, 14));
  for (auto& e : concat.parameters().entries()) e.tensor[0] -= 0.25;
  save_checkpoint(dir / "c", concat);
  const auto doha = load_checkpoint<double>(dir / "c", GroundingMode::DoHA);
  for (const auto& e : concat.parameters().entries()) {
    EXPECT_EQ(doha.parameters().at(e.name).storage(), e.tensor.storage()) << e.name;
  }
  const auto& p = doha.parameters();
  std::size_t doc_tensors = 0;
  for (const auto& e : p.entries()) {
    if (e.name.find("cross_doc") == std::string::npos) continue;
    ++doc_tensors;
    std::string twin = e.name;
    twin.replace(twin.find("cross_doc"), 9, "cross_cxt");
    for (const char* letter : {"Q", "K", "V", "o"}) {
      const std::string doc_tag = std::string(".Wd") + letter, cxt_tag = std::string(".W") + letter;
      const std::string bdoc = std::string(".bd") + letter, bcxt = std::string(".b") + letter;
      if (auto at = twin.find(doc_tag); at != std::string::npos) twin.replace(at, doc_tag.size(), cxt_tag);
      if (auto at = twin.find(bdoc); at != std::string::npos) twin.replace(at, bdoc.size(), bcxt);
    }
    EXPECT_EQ(e.tensor.storage(), p.at(twin).storage()) << e.name << " vs " << twin;
  }
  EXPECT_GT(doc_tensors, 0u);
}

TEST(Checkpoint, MismatchesAreConfigErrors) {
  TempDir dir;
  const GroundedModel<double> doha(tiny_config(GroundingMode::DoHA, 15));
  save_checkpoint(dir / "d", doha);
  // A DoHA checkpoint carries cross_doc tensors a Concat model has no place for.
  GroundedModel<double> concat(tiny_config(GroundingMode::Concat, 15));
  EXPECT_THROW(load_parameters(dir / "d", concat), ConfigError);

  auto wider = tiny_config(GroundingMode::Concat, 15);
  wider.ffn_dim = 32;
  const GroundedModel<double> narrow(tiny_config(GroundingMode::Concat, 15));
  save_checkpoint(dir / "n", narrow);
  GroundedModel<double> w(wider);
  EXPECT_THROW(load_parameters(dir / "n", w), ConfigError);

  EXPECT_THROW(load_checkpoint<double>(dir / "missing"), IoError);
}

TEST(Checkpoint, TruncatedParameterBlobIsAnIoError) {
  TempDir dir;
  const GroundedModel<double> m(tiny_config(GroundingMode::Concat, 16));
  save_checkpoint(dir / "t", m);
  std::filesystem::resize_file(dir / "t" / "params.bin", 16);
  EXPECT_THROW(load_checkpoint<double>(dir / "t"), IoError);
}

}  // namespace
}  // namespace groundgen
