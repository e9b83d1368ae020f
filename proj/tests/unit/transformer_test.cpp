#include <gtest/gtest.h>

#include <cmath>

#include "groundgen/transformer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace groundgen {
namespace {

using testing::random_tensor;

constexpr std::size_t kFfn = 32;

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double max_abs_diff_rows(const Tensor<double>& a, const Tensor<double>& b, std::size_t row_begin, std::size_t rows) {
  double m = 0;
  for (std::size_t r = row_begin; r < row_begin + rows; ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::fabs(a.at(r, c) - b.at(r, c)));
  }
  return m;
}

// Store whose every entry (biases and gains included) is random, so no term
// vanishes by accident.
void randomize(ParameterStore<double>& store, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& e : store.entries()) {
    for (double& x : e.tensor.data()) x = scale * rng.normal();
  }
}

TEST(MultiHeadAttention, ZeroQueryKeyWeightsGiveTheMeanOfValues) {
  ParameterStore<double> store;
  auto mh = register_multi_head(store, "attn", 4, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    store[mh.w_v[0]].at(i, i) = 1;
    store[mh.w_o].at(i, i) = 1;
  }
  Rng rng(1);
  auto q = random_tensor(rng, {2, 4});
  auto v = random_tensor(rng, {4, 4});
  Graph<double> g;
  auto out = multi_head_attention(g, store, mh, g.constant(q), g.constant(v), g.constant(v), single_block_layout(2, 4));
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c) + v.at(3, c)) / 4;
      EXPECT_NEAR(out.value().at(r, c), mean, 1e-12);
    }
  }
}

TEST(MultiHeadAttention, SingleKeyGetsWeightOne) {
  ParameterStore<double> store;
  auto mh = register_multi_head(store, "attn", 8, 2);
  randomize(store, 2);
  Rng rng(3);
  auto q = random_tensor(rng, {1, 8});
  auto kv = random_tensor(rng, {1, 8});
  Graph<double> g;
  auto out = multi_head_attention(g, store, mh, g.constant(q), g.constant(kv), g.constant(kv), single_block_layout(1, 1));
  // With one key every head returns its projected value row.
  const auto expected = oracle::multi_head_attention(store, mh, oracle::to_matrix(q), oracle::to_matrix(kv),
                                                     oracle::to_matrix(kv), {});
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.value().at(0, c), expected[0][c], 1e-12);
}

TEST(MultiHeadAttention, MatchesBruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t heads = 1 + rng.index(3);
    const std::size_t d = heads * (1 + rng.index(4));
    const std::size_t tq = 1 + rng.index(5), tk = 1 + rng.index(6);
    ParameterStore<double> store;
    auto mh = register_multi_head(store, "attn", d, heads);
    randomize(store, 100 + trial);
    auto q = random_tensor(rng, {tq, d});
    auto k = random_tensor(rng, {tk, d});
    auto v = random_tensor(rng, {tk, d});
    std::vector<std::uint8_t> mask(tq * tk);
    std::vector<std::vector<bool>> allowed(tq, std::vector<bool>(tk));
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t forced = rng.index(tk);
      for (std::size_t j = 0; j < tk; ++j) {
        const bool ok = j == forced || rng.uniform() < 0.7;
        mask[i * tk + j] = ok;
        allowed[i][j] = ok;
      }
    }
    Graph<double> g;
    auto out = multi_head_attention(g, store, mh, g.constant(q), g.constant(k), g.constant(v),
                                    single_block_layout(tq, tk, false, mask));
    const auto expected = oracle::multi_head_attention(store, mh, oracle::to_matrix(q), oracle::to_matrix(k),
                                                       oracle::to_matrix(v), allowed);
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t c = 0; c < d; ++c) ASSERT_NEAR(out.value().at(i, c), expected[i][c], 1e-10);
    }
  }
}

TEST(MultiHeadAttention, TwoHeadCaseMatchesOracle) {
  ParameterStore<double> store;
  auto mh = register_multi_head(store, "attn", 8, 2);
  randomize(store, 5);
  Rng rng(6);
  auto q = random_tensor(rng, {3, 8});
  auto k = random_tensor(rng, {5, 8});
  auto v = random_tensor(rng, {5, 8});
  Graph<double> g;
  auto out = multi_head_attention(g, store, mh, g.constant(q), g.constant(k), g.constant(v), single_block_layout(3, 5));
  const auto expected =
      oracle::multi_head_attention(store, mh, oracle::to_matrix(q), oracle::to_matrix(k), oracle::to_matrix(v), {});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.value().at(i, c), expected[i][c], 1e-10);
  }
}

TEST(MultiHeadAttention, PackedBlocksEqualSeparateCalls) {
  ParameterStore<double> store;
  auto mh = register_multi_head(store, "attn", 8, 2);
  randomize(store, 7);
  Rng rng(8);
  auto q = random_tensor(rng, {5, 8});
  auto k = random_tensor(rng, {7, 8});
  Graph<double> g;
  AttentionLayout packed{AttentionBlock{0, 2, 0, 3, false, {}}, AttentionBlock{2, 3, 3, 4, false, {}}};
  auto out = multi_head_attention(g, store, mh, g.constant(q), g.constant(k), g.constant(k), packed);
  auto part = [&](std::size_t qb, std::size_t ql, std::size_t kb, std::size_t kl) {
    auto qs = slice_rows(g.constant(q), qb, ql);
    auto ks = slice_rows(g.constant(k), kb, kl);
    return multi_head_attention(g, store, mh, qs, ks, ks, single_block_layout(ql, kl)).value();
  };
  auto a = part(0, 2, 0, 3);
  auto b = part(2, 3, 3, 4);
  for (std::size_t c = 0; c < 8; ++c) {
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(out.value().at(r, c), a.at(r, c), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(out.value().at(2 + r, c), b.at(r, c), 1e-12);
  }
}

TEST(EncoderForward, EmptyStackIsIdentity) {
  ParameterStore<double> store;
  Rng rng(9);
  auto x = random_tensor(rng, {4, 8});
  Graph<double> g;
  ForwardContext<double> ctx;
  auto out = encoder_forward<double>(g, store, {}, g.constant(x), single_block_layout(4, 4), ctx);
  EXPECT_EQ(out.value().storage(), x.storage());
}

TEST(EncoderForward, PreservesShapeForAnyDepth) {
  for (std::size_t layers = 1; layers <= 3; ++layers) {
    ParameterStore<double> store;
    std::vector<EncoderLayer> stack;
    for (std::size_t i = 0; i < layers; ++i) {
      stack.push_back(register_encoder_layer(store, "enc" + std::to_string(i), 8, 2, kFfn));
    }
    randomize(store, layers);
    Rng rng(10);
    Graph<double> g;
    ForwardContext<double> ctx;
    auto out = encoder_forward<double>(g, store, stack, g.constant(random_tensor(rng, {6, 8})),
                                       single_block_layout(6, 6), ctx);
    EXPECT_EQ(out.shape(), (Shape{6, 8}));
  }
}

TEST(EncoderForward, PaddedPositionsNeverReachRealOnes) {
  ParameterStore<double> store;
  std::vector<EncoderLayer> stack{register_encoder_layer(store, "enc0", 8, 2, kFfn),
                                  register_encoder_layer(store, "enc1", 8, 2, kFfn)};
  randomize(store, 11);
  Rng rng(12);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 0};
  auto x = random_tensor(rng, {5, 8});
  auto perturbed = x;
  for (std::size_t c = 0; c < 8; ++c) perturbed.at(3, c) += 5.0 * rng.normal();
  for (std::size_t c = 0; c < 8; ++c) perturbed.at(4, c) -= 3.0;
  auto run = [&](const Tensor<double>& input) {
    Graph<double> g;
    ForwardContext<double> ctx;
    return encoder_forward<double>(g, store, stack, g.constant(input), key_padding_layout(5, valid), ctx).value();
  };
  EXPECT_LT(max_abs_diff_rows(run(x), run(perturbed), 0, 3), 1e-9);
}

struct DecoderFixture {
  ParameterStore<double> store;
  DecoderLayerStd std_layer;
  DecoderLayerDoHA doha_layer;

  DecoderFixture() {
    std_layer = register_decoder_layer_std(store, "std", 8, 2, kFfn);
    doha_layer = register_decoder_layer_doha(store, "doha", 8, 2, kFfn, DocNorm::Shared);
    randomize(store, 13);
  }
};

TEST(DecoderLayerStd, IsCausal) {
  DecoderFixture f;
  Rng rng(14);
  auto hx = random_tensor(rng, {5, 8});
  auto src = random_tensor(rng, {4, 8});
  auto run = [&](const Tensor<double>& x) {
    Graph<double> g;
    ForwardContext<double> ctx;
    return decoder_layer_std(g, f.store, f.std_layer, g.constant(x), single_block_layout(5, 5, true),
                             g.constant(src), single_block_layout(5, 4), ctx)
        .value();
  };
  const auto base = run(hx);
  EXPECT_EQ(base.shape(), (Shape{5, 8}));
  for (std::size_t t = 0; t < 5; ++t) {
    auto changed = hx;
    for (std::size_t r = t + 1; r < 5; ++r) {
      for (std::size_t c = 0; c < 8; ++c) changed.at(r, c) += rng.normal();
    }
    EXPECT_LT(max_abs_diff_rows(base, run(changed), 0, t + 1), 1e-9) << "position " << t;
  }
}

TEST(DecoderLayerStd, TraceIsSelfCrossFfn) {
  DecoderFixture f;
  Rng rng(15);
  Graph<double> g;
  SublayerTrace trace;
  ForwardContext<double> ctx;
  ctx.trace = &trace;
  decoder_layer_std(g, f.store, f.std_layer, g.constant(random_tensor(rng, {2, 8})), single_block_layout(2, 2, true),
                    g.constant(random_tensor(rng, {3, 8})), single_block_layout(2, 3), ctx);
  EXPECT_EQ(trace, (SublayerTrace{"Self", "Cross", "FFN"}));
}

TEST(DecoderLayerStd, EmptySourceIsRejected) {
  DecoderFixture f;
  Rng rng(16);
  Graph<double> g;
  ForwardContext<double> ctx;
  AttentionLayout empty_src{AttentionBlock{0, 2, 0, 0, false, {}}};
  EXPECT_THROW(decoder_layer_std(g, f.store, f.std_layer, g.constant(random_tensor(rng, {2, 8})),
                                 single_block_layout(2, 2, true), g.constant(random_tensor(rng, {1, 8})), empty_src,
                                 ctx),
               InputError);
}

struct DohaRun {
  Tensor<double> out;
  std::vector<Tensor<double>> sublayers;
  SublayerTrace trace;
};

DohaRun run_doha(const ParameterStore<double>& store, const DecoderLayerDoHA& layer, const Tensor<double>& hx,
                 const Tensor<double>& hc, const Tensor<double>& hd) {
  Graph<double> g;
  DohaRun r;
  std::vector<Var<double>> subs;
  ForwardContext<double> ctx;
  ctx.trace = &r.trace;
  ctx.sublayer_outputs = &subs;
  r.out = decoder_layer_doha(g, store, layer, g.constant(hx), single_block_layout(hx.rows(), hx.rows(), true),
                             g.constant(hc), single_block_layout(hx.rows(), hc.rows()), g.constant(hd),
                             single_block_layout(hx.rows(), hd.rows()), ctx)
              .value();
  for (auto v : subs) r.sublayers.push_back(v.value());
  return r;
}

TEST(DecoderLayerDoHA, TraceIsSelfCxtDocFfn) {
  DecoderFixture f;
  Rng rng(17);
  auto r = run_doha(f.store, f.doha_layer, random_tensor(rng, {3, 8}), random_tensor(rng, {2, 8}),
                    random_tensor(rng, {5, 8}));
  EXPECT_EQ(r.trace, (SublayerTrace{"Self", "Cxt", "Doc", "FFN"}));
  EXPECT_EQ(r.out.shape(), (Shape{3, 8}));
}

TEST(DecoderLayerDoHA, IsCausal) {
  DecoderFixture f;
  Rng rng(18);
  auto hx = random_tensor(rng, {4, 8});
  auto hc = random_tensor(rng, {3, 8});
  auto hd = random_tensor(rng, {6, 8});
  const auto base = run_doha(f.store, f.doha_layer, hx, hc, hd).out;
  for (std::size_t t = 0; t < 4; ++t) {
    auto changed = hx;
    for (std::size_t r = t + 1; r < 4; ++r) {
      for (std::size_t c = 0; c < 8; ++c) changed.at(r, c) += rng.normal();
    }
    EXPECT_LT(max_abs_diff_rows(base, run_doha(f.store, f.doha_layer, changed, hc, hd).out, 0, t + 1), 1e-9);
  }
}

TEST(DecoderLayerDoHA, CxtSublayerSeesOnlyContextAndDocSublayerSeesDocument) {
  DecoderFixture f;
  Rng rng(19);
  auto hx = random_tensor(rng, {3, 8});
  auto hc = random_tensor(rng, {2, 8});
  auto hd = random_tensor(rng, {5, 8});
  const auto base = run_doha(f.store, f.doha_layer, hx, hc, hd);

  auto hd2 = hd;
  for (double& x : hd2.data()) x += rng.normal();
  const auto doc_moved = run_doha(f.store, f.doha_layer, hx, hc, hd2);
  EXPECT_LT(max_abs_diff(base.sublayers[0], doc_moved.sublayers[0]), 1e-12);
  EXPECT_LT(max_abs_diff(base.sublayers[1], doc_moved.sublayers[1]), 1e-12);
  EXPECT_GT(max_abs_diff(base.sublayers[2], doc_moved.sublayers[2]), 1e-6);

  auto hc2 = hc;
  for (double& x : hc2.data()) x += rng.normal();
  const auto cxt_moved = run_doha(f.store, f.doha_layer, hx, hc2, hd);
  EXPECT_LT(max_abs_diff(base.sublayers[0], cxt_moved.sublayers[0]), 1e-12);
  EXPECT_GT(max_abs_diff(base.sublayers[1], cxt_moved.sublayers[1]), 1e-6);
}

TEST(DecoderLayerDoHA, DocSublayerIsQueriedByTheCxtOutput) {
  DecoderFixture f;
  Rng rng(20);
  auto hx = random_tensor(rng, {3, 8});
  auto hc = random_tensor(rng, {2, 8});
  auto hd = random_tensor(rng, {4, 8});
  const auto r = run_doha(f.store, f.doha_layer, hx, hc, hd);
  // Recompute the Doc sublayer from the captured Cxt output.
  Graph<double> g;
  ForwardContext<double> ctx;
  auto cxt = g.constant(r.sublayers[1]);
  auto attn = multi_head_attention(g, f.store, f.doha_layer.cross_doc, cxt, g.constant(hd), g.constant(hd),
                                   single_block_layout(3, 4));
  auto expected = residual_norm(g, f.store, f.doha_layer.cross_cxt_norm, cxt, attn, ctx);
  EXPECT_LT(max_abs_diff(expected.value(), r.sublayers[2]), 1e-12);
}

TEST(DecoderLayerDoHA, EmptyContextOrDocumentIsRejected) {
  DecoderFixture f;
  Rng rng(21);
  auto hx = random_tensor(rng, {2, 8});
  Graph<double> g;
  ForwardContext<double> ctx;
  AttentionLayout empty{AttentionBlock{0, 2, 0, 0, false, {}}};
  auto x = g.constant(hx);
  auto src = g.constant(random_tensor(rng, {3, 8}));
  EXPECT_THROW(decoder_layer_doha(g, f.store, f.doha_layer, x, single_block_layout(2, 2, true), src, empty, src,
                                  single_block_layout(2, 3), ctx),
               InputError);
  EXPECT_THROW(decoder_layer_doha(g, f.store, f.doha_layer, x, single_block_layout(2, 2, true), src,
                                  single_block_layout(2, 3), src, empty, ctx),
               InputError);
}

TEST(InitDohaFromCxt, CopiesEveryTensorAndIsIdempotent) {
  for (DocNorm norm : {DocNorm::Shared, DocNorm::Separate}) {
    ParameterStore<double> store;
    auto layer = register_decoder_layer_doha(store, "dec", 8, 2, kFfn, norm);
    randomize(store, 22);
    init_doha_from_cxt(store, layer);
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_EQ(store[layer.cross_doc.w_q[h]].storage(), store[layer.cross_cxt.w_q[h]].storage());
      EXPECT_EQ(store[layer.cross_doc.w_k[h]].storage(), store[layer.cross_cxt.w_k[h]].storage());
      EXPECT_EQ(store[layer.cross_doc.w_v[h]].storage(), store[layer.cross_cxt.w_v[h]].storage());
      EXPECT_EQ(store[layer.cross_doc.b_q[h]].storage(), store[layer.cross_cxt.b_q[h]].storage());
    }
    EXPECT_EQ(store[layer.cross_doc.w_o].storage(), store[layer.cross_cxt.w_o].storage());
    EXPECT_EQ(store[layer.cross_doc.b_o].storage(), store[layer.cross_cxt.b_o].storage());
    EXPECT_EQ(store[layer.cross_doc_norm.gamma].storage(), store[layer.cross_cxt_norm.gamma].storage());
    std::vector<AlignedVector<double>> once;
    for (const auto& e : store.entries()) once.push_back(e.tensor.storage());
    init_doha_from_cxt(store, layer);
    for (std::size_t i = 0; i < store.size(); ++i) EXPECT_EQ(store[i].storage(), once[i]);
  }
}

TEST(InitDohaFromCxt, DocAttentionEqualsCxtAttentionAfterInit) {
  ParameterStore<double> store;
  auto layer = register_decoder_layer_doha(store, "dec", 8, 2, kFfn, DocNorm::Shared);
  randomize(store, 23);
  init_doha_from_cxt(store, layer);
  Rng rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    auto q = random_tensor(rng, {3, 8});
    auto kv = random_tensor(rng, {4, 8});
    Graph<double> g;
    auto a = multi_head_attention(g, store, layer.cross_cxt, g.constant(q), g.constant(kv), g.constant(kv),
                                  single_block_layout(3, 4));
    auto b = multi_head_attention(g, store, layer.cross_doc, g.constant(q), g.constant(kv), g.constant(kv),
                                  single_block_layout(3, 4));
    EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-12);
  }
}

TEST(Registration, DohaLayerAddsOneMultiHeadOfParameters) {
  for (std::size_t heads : {1, 2, 4}) {
    const std::size_t d = 8;
    ParameterStore<double> a, b;
    register_decoder_layer_std(a, "dec", d, heads, kFfn);
    register_decoder_layer_doha(b, "dec", d, heads, kFfn, DocNorm::Shared);
    EXPECT_EQ(b.scalar_count(), a.scalar_count() + 4 * d * d + 4 * d);
    // A separate norm pair for the document sublayer costs 2d more.
    ParameterStore<double> c;
    register_decoder_layer_doha(c, "dec", d, heads, kFfn, DocNorm::Separate);
    EXPECT_EQ(c.scalar_count(), b.scalar_count() + 2 * d);
  }
}

TEST(Registration, DocumentHeadUsesDocumentNames) {
  ParameterStore<double> store;
  register_decoder_layer_doha(store, "decoder.layer3", 8, 2, kFfn, DocNorm::Shared);
  EXPECT_TRUE(store.find("decoder.layer3.cross_doc.WdQ.head1").has_value());
  EXPECT_TRUE(store.find("decoder.layer3.cross_doc.WdK.head0").has_value());
  EXPECT_TRUE(store.find("decoder.layer3.cross_doc.WdV.head1").has_value());
  EXPECT_TRUE(store.find("decoder.layer3.cross_doc.Wdo").has_value());
}

}  // namespace
}  // namespace groundgen
