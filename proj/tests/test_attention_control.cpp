#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace ditctrl;
using ditctrl::testing::random_matrix;

namespace {

// Independent evaluation of the fused attention: video query v may only see text keys and the
// source video keys whose mask bit equals its own current-mask bit; text queries see all keys.
Tensor brute_force_fusion(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_text,
                          const std::vector<int>& m_src, const std::vector<int>& m_cur, double scale) {
    const std::size_t L = q.rows(), keys = k.rows(), dh = v.cols();
    Tensor out({L, dh});
    for (std::size_t i = 0; i < L; ++i) {
        std::vector<long double> w(keys, 0.0L);
        long double mx = -INFINITY;
        auto allowed = [&](std::size_t j) {
            if (j < n_text || i < n_text) return true;
            return m_src[j - n_text] == m_cur[i - n_text];
        };
        std::vector<long double> logit(keys);
        for (std::size_t j = 0; j < keys; ++j) {
            long double dot = 0;
            for (std::size_t c = 0; c < q.cols(); ++c) dot += static_cast<long double>(q(i, c)) * k(j, c);
            logit[j] = dot * scale;
            if (allowed(j)) mx = std::max(mx, logit[j]);
        }
        long double sum = 0;
        for (std::size_t j = 0; j < keys; ++j)
            if (allowed(j)) sum += w[j] = std::exp(logit[j] - mx);
        for (std::size_t c = 0; c < dh; ++c) {
            long double acc = 0;
            for (std::size_t j = 0; j < keys; ++j) acc += w[j] / sum * v(j, c);
            out(i, c) = static_cast<double>(acc);
        }
    }
    return out;
}

std::vector<std::uint8_t> bits_of(unsigned pattern, std::size_t n) {
    std::vector<std::uint8_t> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = (pattern >> i) & 1u;
    return b;
}

AttentionRecord blank_record(std::size_t layers, std::size_t heads, std::size_t n_text, std::size_t F, std::size_t H,
                             std::size_t W) {
    AttentionRecord r;
    r.n_layers = layers;
    r.n_heads = heads;
    r.n_text = n_text;
    r.frames = F;
    r.height = H;
    r.width = W;
    r.probs.assign(layers * heads, Tensor({r.length(), r.length()}));
    return r;
}

} // namespace

// ---------------------------------------------------------------------------------------------

TEST(Window, HalfOpenBoundaries) {
    ControlConfig c;
    c.kv_share_steps = {2, 25};
    c.kv_share_layers = {25, 30};
    EXPECT_TRUE(window_active(2, 25, c));
    EXPECT_FALSE(window_active(25, 25, c));
    EXPECT_FALSE(window_active(10, 10, c));
    EXPECT_FALSE(window_active(1, 29, c));
    EXPECT_TRUE(window_active(24, 29, c));
    EXPECT_FALSE(window_active(24, 30, c));
}

TEST(Window, DefaultsFollowPublishedHyperparameters) {
    const ControlConfig c;
    EXPECT_EQ(c.kv_share_steps, (Window{2, 25}));
    EXPECT_EQ(c.kv_share_layers, (Window{25, 30}));
    EXPECT_EQ(c.mask_threshold, 0.3);
}

TEST(Window, ValidationRejectsOutOfRangeWindows) {
    ControlConfig c;
    EXPECT_NO_THROW(c.validate(50, 30));
    EXPECT_THROW(c.validate(50, 4), Error);
    c.kv_share_layers = {3, 2};
    EXPECT_THROW(c.validate(50, 30), Error);
    c.kv_share_layers = {0, 0};
    c.mask_threshold = 1.5;
    EXPECT_THROW(c.validate(50, 30), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(SemanticMap, UniformAttentionNormalizesToZero) {
    AttentionRecord r = blank_record(2, 2, 3, 2, 2, 2);
    for (auto& a : r.probs) a = Tensor({r.length(), r.length()}, 1.0 / static_cast<double>(r.length()));
    const SemanticMap m = extract_semantic_map(r, {1});
    EXPECT_EQ(m.values.dims(), (Dims{2, 2, 2}));
    for (double v : m.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(SemanticMap, OneHotAttentionMarksThatToken) {
    AttentionRecord r = blank_record(1, 1, 2, 1, 2, 3);
    const std::size_t target = 4; // video token index
    Tensor& a = r.probs[0];
    a(1, 2 + target) = 1.0;       // T2V row of token 1
    a(2 + target, 1) = 1.0;       // V2T column of token 1
    const SemanticMap m = extract_semantic_map(r, {1});
    for (std::size_t v = 0; v < 6; ++v) EXPECT_EQ(m.values[v], v == target ? 1.0 : 0.0);
}

TEST(SemanticMap, HandAverageOverLayersHeadsAndTokens) {
    AttentionRecord r = blank_record(2, 1, 3, 2, 1, 2);
    Rng rng(12);
    for (auto& a : r.probs) a = random_matrix(7, 7, rng, 0.0, 1.0);
    const std::vector<std::size_t> tokens{0, 2};
    const SemanticMap m = extract_semantic_map(r, tokens);
    std::vector<double> raw(4, 0.0);
    for (std::size_t v = 0; v < 4; ++v) {
        double s = 0;
        for (const auto& a : r.probs)
            for (std::size_t j : tokens) s += 0.5 * a(j, 3 + v) + 0.5 * a(3 + v, j);
        raw[v] = s / 4.0;
    }
    for (std::size_t f = 0; f < 2; ++f) {
        const double lo = std::min(raw[2 * f], raw[2 * f + 1]), hi = std::max(raw[2 * f], raw[2 * f + 1]);
        for (std::size_t p = 0; p < 2; ++p)
            EXPECT_NEAR(m.values[2 * f + p], (raw[2 * f + p] - lo) / (hi - lo), 1e-12);
    }
}

TEST(SemanticMap, RejectsBadTokensAndIncompleteRecords) {
    AttentionRecord r = blank_record(1, 1, 2, 1, 1, 2);
    EXPECT_THROW(extract_semantic_map(r, {2}), Error);
    EXPECT_THROW(extract_semantic_map(r, {}), Error);
    r.probs[0] = Tensor{};
    EXPECT_THROW(extract_semantic_map(r, {0}), Error);
}

TEST(Binarize, ThresholdIsInclusive) {
    SemanticMap m;
    m.values = Tensor({1, 1, 4}, {0.1, 0.29, 0.3, 0.9});
    const SemanticMask b = binarize(m, 0.3);
    EXPECT_EQ(b.bits.values()[0], 0.0);
    EXPECT_EQ(b.bits.values()[1], 0.0);
    EXPECT_EQ(b.bits.values()[2], 1.0);
    EXPECT_EQ(b.bits.values()[3], 1.0);
    m.values = Tensor({1, 2, 2}, 0.3);
    EXPECT_EQ(binarize(m, 0.3).count(), 4u);
    m.values = Tensor({1, 2, 2}, 0.0);
    EXPECT_EQ(binarize(m, 0.3).count(), 0u);
    EXPECT_THROW(binarize(m, 1.5), Error);
    EXPECT_THROW(binarize(m, 0.0), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(KvShare, OwnKeysAndValuesEqualVanillaAttention) {
    Rng rng(1);
    const Tensor q = random_matrix(9, 4, rng), k = random_matrix(9, 4, rng), v = random_matrix(9, 4, rng);
    const KeyValues kv = assemble_shared_kv(k, v, 3, k, v, 3);
    const HeadOutput a = kv_share(q, kv, 0.5), b = attention_head(q, k, v, 0.5);
    EXPECT_TRUE(bitwise_equal(a.output, b.output));
    EXPECT_TRUE(bitwise_equal(a.probs, b.probs));
}

TEST(KvShare, ZeroSourceValuesGiveZeroVideoContribution) {
    Rng rng(2);
    const Tensor q = random_matrix(5, 3, rng), k = random_matrix(5, 3, rng);
    const Tensor zeros({5, 3});
    const HeadOutput out = kv_share(q, KeyValues{k, zeros, 0}, 1.0);
    for (double x : out.output.values()) EXPECT_EQ(x, 0.0);
}

TEST(KvShare, TextFromCurrentVideoFromSource) {
    Rng rng(3);
    const Tensor kc = random_matrix(5, 2, rng), vc = random_matrix(5, 2, rng);
    const Tensor ks = random_matrix(6, 2, rng), vs = random_matrix(6, 2, rng);
    const KeyValues kv = assemble_shared_kv(kc, vc, 2, ks, vs, 3);
    EXPECT_EQ(kv.keys, concat_rows(slice_rows(kc, 0, 2), slice_rows(ks, 3, 6)));
    EXPECT_EQ(kv.values, concat_rows(slice_rows(vc, 0, 2), slice_rows(vs, 3, 6)));
    EXPECT_THROW(assemble_shared_kv(kc, vc, 2, ks, vs, 2), Error);
}

TEST(KvShare, ThreeByThreeHandExample) {
    const Tensor q = Tensor::matrix(3, 1, {1, 0, -1});
    const Tensor k = Tensor::matrix(3, 1, {1, 2, 3});
    const Tensor v = Tensor::matrix(3, 1, {10, 20, 30});
    const HeadOutput out = kv_share(q, KeyValues{k, v, 1}, 1.0);
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    EXPECT_NEAR(out.output(0, 0), (10 * e1 + 20 * e2 + 30 * e3) / (e1 + e2 + e3), 1e-12);
    EXPECT_NEAR(out.output(1, 0), 20.0, 1e-12);
    const double f1 = std::exp(-1.0), f2 = std::exp(-2.0), f3 = std::exp(-3.0);
    EXPECT_NEAR(out.output(2, 0), (10 * f1 + 20 * f2 + 30 * f3) / (f1 + f2 + f3), 1e-12);
}

// ---------------------------------------------------------------------------------------------

TEST(Fusion, MatchesBruteForceForEveryValidMaskPair) {
    Rng rng(77);
    const std::size_t n_text = 2, nv = 4, dh = 3;
    const Tensor q = random_matrix(n_text + nv, dh, rng, -2, 2);
    const Tensor k = random_matrix(n_text + nv, dh, rng, -2, 2);
    const Tensor v = random_matrix(n_text + nv, dh, rng, -2, 2);
    const double scale = 1.0 / std::sqrt(3.0);
    int checked = 0;
    for (unsigned src = 1; src < 15; ++src)
        for (unsigned cur = 0; cur < 16; ++cur) {
            const auto ms = bits_of(src, nv), mc = bits_of(cur, nv);
            const HeadOutput out = mask_guided_fusion(q, KeyValues{k, v, n_text}, ms, mc, scale);
            const Tensor ref = brute_force_fusion(q, k, v, n_text, std::vector<int>(ms.begin(), ms.end()),
                                                  std::vector<int>(mc.begin(), mc.end()), scale);
            EXPECT_LE(max_abs_diff(out.output, ref), 1e-12) << "src " << src << " cur " << cur;
            ++checked;
        }
    EXPECT_EQ(checked, 14 * 16);
}

TEST(Fusion, HandInstanceWithHalfForegroundMask) {
    // 4 video tokens, no text; keys are scalars so each restricted softmax is two terms.
    const Tensor q = Tensor::matrix(4, 1, {1, 1, 1, 1});
    const Tensor k = Tensor::matrix(4, 1, {0, 1, 2, 3});
    const Tensor v = Tensor::matrix(4, 1, {1, 2, 3, 4});
    const std::vector<std::uint8_t> m_src{1, 1, 0, 0}, m_cur{1, 0, 1, 0};
    const HeadOutput out = mask_guided_fusion(q, KeyValues{k, v, 0}, m_src, m_cur, 1.0);
    const double fg = (1 * std::exp(0.0) + 2 * std::exp(1.0)) / (std::exp(0.0) + std::exp(1.0));
    const double bg = (3 * std::exp(2.0) + 4 * std::exp(3.0)) / (std::exp(2.0) + std::exp(3.0));
    EXPECT_NEAR(out.output(0, 0), fg, 1e-12);
    EXPECT_NEAR(out.output(1, 0), bg, 1e-12);
    EXPECT_NEAR(out.output(2, 0), fg, 1e-12);
    EXPECT_NEAR(out.output(3, 0), bg, 1e-12);
    EXPECT_EQ(out.probs(0, 2), 0.0);
    EXPECT_EQ(out.probs(1, 0), 0.0);
}

TEST(Fusion, ForegroundQueryEqualsMaskedSoftmaxOverForegroundKeys) {
    Rng rng(8);
    const Tensor q = random_matrix(6, 2, rng), k = random_matrix(6, 2, rng), v = random_matrix(6, 2, rng);
    const std::vector<std::uint8_t> m_src{1, 0, 1, 0}, m_cur{1, 1, 1, 1};
    const Tensor p = mask_guided_probs(q, KeyValues{k, v, 2}, m_src, m_cur, 0.7);
    Tensor logits = matmul_transposed(q, k);
    for (auto& x : logits.values()) x *= 0.7;
    const std::vector<std::uint8_t> keys{1, 1, 1, 0, 1, 0};
    const Tensor ref = masked_softmax_rows(logits, keys);
    for (std::size_t r = 2; r < 6; ++r)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(p(r, c), ref(r, c));
    const Tensor text = softmax_rows(slice_rows(logits, 0, 2));
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(p(0, c), text(0, c));
}

TEST(Fusion, DegenerateSourceMasksAreRejectedWithTheEmptySide) {
    Rng rng(9);
    const Tensor q = random_matrix(4, 2, rng), k = random_matrix(4, 2, rng), v = random_matrix(4, 2, rng);
    const std::vector<std::uint8_t> ones(4, 1), zeros(4, 0);
    try {
        mask_guided_fusion(q, KeyValues{k, v, 0}, ones, ones, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateMask);
        EXPECT_NE(std::string(e.what()).find("background"), std::string::npos);
    }
    try {
        mask_guided_fusion(q, KeyValues{k, v, 0}, zeros, ones, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateMask);
        EXPECT_NE(std::string(e.what()).find("foreground"), std::string::npos);
    }
    const std::vector<std::uint8_t> short_mask{1, 0};
    EXPECT_THROW(mask_guided_fusion(q, KeyValues{k, v, 0}, short_mask, ones, 1.0), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(Reweight, FactorOneIsBitwiseIdentity) {
    Rng rng(4);
    const Tensor p = softmax_rows(random_matrix(7, 7, rng));
    EXPECT_TRUE(bitwise_equal(reweight_region(p, 3, 1, 1.0), p));
}

TEST(Reweight, FactorZeroRemovesTheTokenFromVideoOutputs) {
    Rng rng(5);
    const Tensor p = softmax_rows(random_matrix(6, 6, rng));
    const Tensor r = reweight_region(p, 2, 0, 0.0);
    for (std::size_t c = 2; c < 6; ++c) EXPECT_EQ(r(0, c), 0.0);
    for (std::size_t v = 2; v < 6; ++v) EXPECT_EQ(r(v, 0), 0.0);
    Tensor values({6, 1});
    values(0, 0) = 100.0; // only token 0 carries value
    const Tensor out = matmul(r, values);
    for (std::size_t v = 2; v < 6; ++v) EXPECT_EQ(out(v, 0), 0.0);
    EXPECT_EQ(r(0, 0), p(0, 0)); // T2T untouched
    EXPECT_EQ(r(1, 1), p(1, 1));
}

TEST(Reweight, FactorTwoDoublesTextContributionOfOneHotColumn) {
    // 3 tokens: one text, two video. Video query 1 attends only to the text token.
    const Tensor p = Tensor::matrix(3, 3, {0.5, 0.25, 0.25, 1.0, 0.0, 0.0, 0.2, 0.4, 0.4});
    const Tensor values = Tensor::matrix(3, 1, {3.0, 5.0, 7.0});
    const Tensor before = matmul(p, values), after = matmul(reweight_region(p, 1, 0, 2.0), values);
    EXPECT_EQ(before(1, 0), 3.0);
    EXPECT_EQ(after(1, 0), 6.0);
    EXPECT_EQ(after(2, 0), 0.4 * 3.0 + 0.4 * 5.0 + 0.4 * 7.0);
    EXPECT_EQ(after(0, 0), 0.5 * 3.0 + 0.5 * 5.0 + 0.5 * 7.0);
}

TEST(Reweight, RejectsVideoTokenAndNegativeFactor) {
    const Tensor p({4, 4}, 0.25);
    EXPECT_THROW(reweight_region(p, 2, 2, 1.0), Error);
    EXPECT_THROW(reweight_region(p, 2, 0, -1.0), Error);
}

// ---------------------------------------------------------------------------------------------

TEST(ControlHook, OutsideWindowDefersToVanilla) {
    ControlConfig c;
    c.kv_share_steps = {2, 4};
    c.kv_share_layers = {1, 2};
    KvCapture cap;
    ControlHook hook(c, 1, "s1");
    hook.share_from(cap);
    Rng rng(6);
    const Tensor q = random_matrix(3, 2, rng);
    EXPECT_FALSE(hook.attend(HeadInputs{1, 0, 1, q, q, q, 1.0}).has_value());
    ControlHook in_window(c, 2, "s1");
    EXPECT_FALSE(in_window.attend(HeadInputs{0, 0, 1, q, q, q, 1.0}).has_value());
}

TEST(ControlHook, ErrorsCarryStepLayerAndBranch) {
    ControlConfig c;
    c.kv_share_steps = {0, 4};
    c.kv_share_layers = {0, 2};
    Rng rng(7);
    const Tensor k = random_matrix(5, 2, rng);
    KvCapture cap;
    cap.n_layers = 2;
    cap.n_heads = 1;
    cap.n_text = 1;
    cap.keys = {k, k};
    cap.values = {k, k};
    SemanticMask all;
    all.bits = Tensor({1, 2, 2}, 1.0);
    ControlHook hook(c, 3, "s1");
    hook.share_from(cap).with_masks(all, all);
    try {
        hook.attend(HeadInputs{1, 0, 1, k, k, k, 1.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateMask);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 3"), std::string::npos);
        EXPECT_NE(msg.find("layer 1"), std::string::npos);
        EXPECT_NE(msg.find("branch s1"), std::string::npos);
    }
}
