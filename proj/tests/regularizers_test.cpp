#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "padkit/gradcheck.hpp"
#include "padkit/ops.hpp"
#include "padkit/regularizers.hpp"

namespace padkit {
namespace {

// Loop-based reference for one P x Q map pair, independent of the tensor ops.
double oracle_distance(const std::vector<double>& a, const std::vector<double>& b, std::size_t p, std::size_t q,
                       const PadMode& mode) {
    auto g = [&](double d) { return mode.symmetry == Symmetry::asym ? std::max(d, 0.0) : d; };
    auto finish = [&](double sq) { return mode.norm == NormKind::squared ? sq : std::sqrt(sq); };
    if (mode.pooling == Pooling::intact) {
        double sq = 0.0;
        for (std::size_t i = 0; i < p * q; ++i) sq += g(a[i] - b[i]) * g(a[i] - b[i]);
        return finish(sq);
    }
    double rows = 0.0, cols = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < q; ++j) sa += a[i * q + j], sb += b[i * q + j];
        rows += g(sa - sb) * g(sa - sb);
    }
    for (std::size_t j = 0; j < q; ++j) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < p; ++i) sa += a[i * q + j], sb += b[i * q + j];
        cols += g(sa - sb) * g(sa - sb);
    }
    return finish(rows) + finish(cols);
}

Tensor random_tensor(const Shape& s, Prng& prng, double scale_by = 1.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = scale_by * prng.normal();
    return Tensor(s, std::move(v));
}

ForwardTrace random_trace(std::size_t layers, std::size_t b, std::size_t k, std::size_t n, std::size_t dh,
                          Prng& prng) {
    ForwardTrace t;
    for (std::size_t l = 0; l < layers; ++l) {
        t.attn.push_back(random_tensor({b, k, n, n}, prng));
        t.ctx.push_back(random_tensor({b, k, n, dh}, prng));
    }
    return t;
}

PadMode mode_of(Symmetry s, DistillTarget t, Pooling p, NormKind n) {
    PadMode m;
    m.symmetry = s;
    m.target = t;
    m.pooling = p;
    m.norm = n;
    return m;
}

std::vector<PadMode> all_modes() {
    std::vector<PadMode> out;
    for (auto s : {Symmetry::sym, Symmetry::asym})
        for (auto n : {NormKind::squared, NormKind::plain}) {
            out.push_back(mode_of(s, DistillTarget::attention, Pooling::spatial, n));
            out.push_back(mode_of(s, DistillTarget::attention, Pooling::intact, n));
            out.push_back(mode_of(s, DistillTarget::functional, Pooling::spatial, n));
            out.push_back(mode_of(s, DistillTarget::functional, Pooling::intact, n));
        }
    return out;
}

Tensor trace_loss(const ForwardTrace& o, const ForwardTrace& n, const PadMode& m) {
    return m.target == DistillTarget::attention ? pad_attention_loss(o, n, m) : fd_functional_loss(o, n, m);
}

TEST(CeLoss, UniformAndPeaked) {
    const std::vector<std::size_t> labels{2};
    EXPECT_NEAR(ce_loss(Tensor::zeros({1, 5}), labels).item(), std::log(5.0), 1e-14);
    EXPECT_LT(ce_loss(Tensor::matrix({{0, 0, 60}}), labels).item(), 1e-20);
    const std::vector<std::size_t> two{1, 1};
    const Tensor row = Tensor::matrix({{0.3, -1.2, 2.0}});
    const Tensor rows = Tensor::matrix({{0.3, -1.2, 2.0}, {0.3, -1.2, 2.0}});
    const std::vector<std::size_t> one{1};
    EXPECT_NEAR(ce_loss(rows, two).item(), ce_loss(row, one).item(), 1e-15);
    const std::vector<std::size_t> bad{3};
    EXPECT_THROW(ce_loss(row, bad), std::out_of_range);
}

TEST(LwfLoss, ClosedFormKl) {
    const Tensor old_logits = Tensor::matrix({{0.0, std::log(2.0)}});
    const Tensor new_logits = Tensor::matrix({{0.0, 0.0}});
    const double expected = (1.0 / 3) * std::log((1.0 / 3) / 0.5) + (2.0 / 3) * std::log((2.0 / 3) / 0.5);
    EXPECT_NEAR(lwf_kd_loss(old_logits, new_logits, 1.0).item(), expected, 1e-14);
    EXPECT_EQ(lwf_kd_loss(old_logits, old_logits.clone(false), 2.0).item(), 0.0);
    EXPECT_THROW(lwf_kd_loss(old_logits, Tensor::zeros({1, 3}), 1.0), DimensionError);
}

TEST(LwfLoss, TemperatureScalingAndNonnegativity) {
    Prng prng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor a = random_tensor({4, 6}, prng, 3.0);
        const Tensor b = random_tensor({4, 6}, prng, 3.0);
        const double t = 0.5 + 3.0 * prng.uniform();
        // Reference: T^2 * mean_b sum_j p_j (log p_j - log q_j) at temperature t.
        double ref = 0.0;
        for (std::size_t r = 0; r < 4; ++r) {
            double mo = -1e300, mn = -1e300;
            for (std::size_t j = 0; j < 6; ++j) mo = std::max(mo, a[r * 6 + j] / t), mn = std::max(mn, b[r * 6 + j] / t);
            double zo = 0.0, zn = 0.0;
            for (std::size_t j = 0; j < 6; ++j) zo += std::exp(a[r * 6 + j] / t - mo), zn += std::exp(b[r * 6 + j] / t - mn);
            for (std::size_t j = 0; j < 6; ++j) {
                const double lp = a[r * 6 + j] / t - mo - std::log(zo);
                const double lq = b[r * 6 + j] / t - mn - std::log(zn);
                ref += std::exp(lp) * (lp - lq);
            }
        }
        ref *= t * t / 4.0;
        const double got = lwf_kd_loss(a, b, t).item();
        EXPECT_NEAR(got, ref, 1e-12 * std::max(1.0, std::abs(ref)));
        EXPECT_GE(got, -1e-14);
    }
}

TEST(LwfLoss, TeacherReceivesNoGradient) {
    Prng prng(4);
    Tensor teacher = random_tensor({3, 4}, prng).clone(true);
    Tensor student = random_tensor({3, 4}, prng).clone(true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(lwf_kd_loss(teacher, student, 2.0));
    EXPECT_FALSE(teacher.has_grad());
    EXPECT_TRUE(student.has_grad());
}

TEST(PoolMap, HandValues) {
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor rows = pool_map(m, PoolAxis::second);
    const Tensor cols = pool_map(m, PoolAxis::first);
    EXPECT_EQ(rows[0], 3.0);
    EXPECT_EQ(rows[1], 7.0);
    EXPECT_EQ(cols[0], 4.0);
    EXPECT_EQ(cols[1], 6.0);
    EXPECT_THROW(pool_map(Tensor::zeros({2, 2, 2}), PoolAxis::first), DimensionError);
    // Permuting within a pooled row keeps the row sums.
    const Tensor swapped = Tensor::matrix({{2, 1}, {4, 3}});
    EXPECT_EQ(pool_map(swapped, PoolAxis::second)[0], 3.0);
    EXPECT_EQ(pool_map(swapped, PoolAxis::second)[1], 7.0);
}

TEST(PadDistance, WorkedValues) {
    PadMode sym = mode_of(Symmetry::sym, DistillTarget::attention, Pooling::spatial, NormKind::squared);
    PadMode asym = sym;
    asym.symmetry = Symmetry::asym;
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(pad_distance(a, Tensor::zeros({2, 2}), sym).item(), 110.0);
    EXPECT_EQ(pad_distance(a, Tensor::zeros({2, 2}), asym).item(), 110.0);
    const Tensor ones = Tensor::full({2, 2}, 1.0);
    const Tensor twos = Tensor::full({2, 2}, 2.0);
    EXPECT_EQ(pad_distance(ones, twos, sym).item(), 16.0);
    EXPECT_EQ(pad_distance(ones, twos, asym).item(), 0.0);
    EXPECT_EQ(pad_distance(a, a.clone(false), sym).item(), 0.0);
    EXPECT_EQ(pad_distance(a, a.clone(false), asym).item(), 0.0);
    EXPECT_THROW(pad_distance(a, Tensor::zeros({2, 3}), sym), DimensionError);
    PadMode intact = sym;
    intact.pooling = Pooling::intact;
    // Squared entries of the raw difference: 1 + 4 + 9 + 16.
    EXPECT_EQ(pad_distance(a, Tensor::zeros({2, 2}), intact).item(), 30.0);
}

TEST(PadDistance, MatchesBruteForceOracle) {
    Prng prng(5);
    for (const PadMode& mode : all_modes()) {
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t p = 1 + prng.below(6), q = 1 + prng.below(6);
            const Tensor a = random_tensor({p, q}, prng), b = random_tensor({p, q}, prng);
            const std::vector<double> av(a.data().begin(), a.data().end()), bv(b.data().begin(), b.data().end());
            const double ref = oracle_distance(av, bv, p, q, mode);
            EXPECT_NEAR(pad_distance(a, b, mode).item(), ref, 1e-12 * std::max(1.0, ref));
        }
    }
}

TEST(PadDistance, ScalesWithNormKind) {
    Prng prng(6);
    for (const PadMode& mode : all_modes()) {
        const Tensor a = random_tensor({4, 5}, prng), b = random_tensor({4, 5}, prng);
        const double c = 2.5;
        const double base = pad_distance(a, b, mode).item();
        const double scaled = pad_distance(scale(a, c), scale(b, c), mode).item();
        const double expected = mode.norm == NormKind::squared ? c * c * base : c * base;
        EXPECT_NEAR(scaled, expected, 1e-12 * std::max(1.0, expected));
    }
}

TEST(PadDistance, InvariantToPermutationWithinSlices) {
    // Reversing the order of rows and of columns maps every row slice and every
    // column slice onto another complete slice, so pooled norms are unchanged.
    Prng prng(7);
    PadMode mode = mode_of(Symmetry::asym, DistillTarget::attention, Pooling::spatial, NormKind::squared);
    const std::size_t p = 5, q = 4;
    const Tensor a = random_tensor({p, q}, prng), b = random_tensor({p, q}, prng);
    auto flip = [&](const Tensor& t) {
        std::vector<double> v(p * q);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) v[i * q + j] = t[(p - 1 - i) * q + (q - 1 - j)];
        return Tensor({p, q}, std::move(v));
    };
    EXPECT_NEAR(pad_distance(flip(a), flip(b), mode).item(), pad_distance(a, b, mode).item(), 1e-12);

    // Permuting within a single row leaves the row sums but not the column sums,
    // so only the width-pooled term is guaranteed; check it through pool_map.
    std::vector<double> av(a.data().begin(), a.data().end());
    std::swap(av[0], av[3]);
    const Tensor a2({p, q}, std::move(av));
    for (std::size_t i = 0; i < p; ++i)
        EXPECT_NEAR(pool_map(a2, PoolAxis::second)[i], pool_map(a, PoolAxis::second)[i], 1e-14);
}

TEST(TraceLosses, VanishOnIdenticalTraces) {
    Prng prng(8);
    const ForwardTrace t = random_trace(2, 3, 2, 5, 4, prng);
    for (const PadMode& mode : all_modes()) {
        EXPECT_EQ(trace_loss(t, t, mode).item(), 0.0);
        PadMode excl = mode;
        excl.include_class_token = false;
        EXPECT_EQ(trace_loss(t, t, excl).item(), 0.0);
    }
}

TEST(TraceLosses, AsymNeverExceedsSym) {
    Prng prng(9);
    for (int trial = 0; trial < 25; ++trial) {
        const ForwardTrace a = random_trace(2, 2, 2, 4, 3, prng);
        const ForwardTrace b = random_trace(2, 2, 2, 4, 3, prng);
        for (const PadMode& mode : all_modes()) {
            if (mode.symmetry != Symmetry::sym) continue;
            PadMode as = mode;
            as.symmetry = Symmetry::asym;
            const double s = trace_loss(a, b, mode).item();
            const double q = trace_loss(a, b, as).item();
            EXPECT_GE(q, 0.0);
            EXPECT_LE(q, s + 1e-12);
        }
    }
}

TEST(TraceLosses, AveragesMatchOracle) {
    Prng prng(10);
    const std::size_t layers = 3, b = 2, k = 2, n = 4, dh = 3;
    const ForwardTrace o = random_trace(layers, b, k, n, dh, prng);
    const ForwardTrace s = random_trace(layers, b, k, n, dh, prng);
    for (const PadMode& mode : all_modes()) {
        for (bool cls : {true, false}) {
            PadMode m = mode;
            m.include_class_token = cls;
            const bool attn = m.target == DistillTarget::attention;
            const std::size_t q = attn ? n : dh;
            double ref = 0.0;
            for (std::size_t l = 0; l < layers; ++l)
                for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t ki = 0; ki < k; ++ki) {
                        const Tensor& to = attn ? o.attn[l] : o.ctx[l];
                        const Tensor& ts = attn ? s.attn[l] : s.ctx[l];
                        const std::size_t base = (bi * k + ki) * n * q;
                        const std::size_t r0 = cls ? 0 : 1;
                        const std::size_t c0 = (cls || !attn) ? 0 : 1;
                        std::vector<double> va, vb;
                        for (std::size_t i = r0; i < n; ++i)
                            for (std::size_t j = c0; j < q; ++j) {
                                va.push_back(to[base + i * q + j]);
                                vb.push_back(ts[base + i * q + j]);
                            }
                        ref += oracle_distance(va, vb, n - r0, q - c0, m);
                    }
            ref /= static_cast<double>(layers * k * b);
            EXPECT_NEAR(trace_loss(o, s, m).item(), ref, 1e-12 * std::max(1.0, ref));
        }
    }
}

TEST(TraceLosses, SingleLayerSingleHeadReducesToDistance) {
    Prng prng(11);
    const ForwardTrace o = random_trace(1, 1, 1, 5, 3, prng);
    const ForwardTrace s = random_trace(1, 1, 1, 5, 3, prng);
    PadMode m = mode_of(Symmetry::sym, DistillTarget::attention, Pooling::spatial, NormKind::squared);
    EXPECT_NEAR(pad_attention_loss(o, s, m).item(), pad_distance(o.attn_map(0, 0), s.attn_map(0, 0), m).item(),
                1e-13);
}

TEST(TraceLosses, IntactReluGate) {
    Prng prng(12);
    const ForwardTrace o = random_trace(2, 2, 2, 4, 3, prng);
    ForwardTrace s = o;
    for (auto& c : s.ctx) {
        std::vector<double> v(c.data().begin(), c.data().end());
        for (auto& x : v) x += 0.1 + prng.uniform();
        c = Tensor(c.shape(), std::move(v));
    }
    auto m = mode_of(Symmetry::asym, DistillTarget::functional, Pooling::intact, NormKind::squared);
    EXPECT_EQ(fd_functional_loss(o, s, m).item(), 0.0);
    m.symmetry = Symmetry::sym;
    EXPECT_GT(fd_functional_loss(o, s, m).item(), 0.0);
}

TEST(TraceLosses, SpatialIgnoresTokenOrderIntactDoesNot) {
    Prng prng(13);
    const std::size_t n = 4, dh = 3;
    const ForwardTrace o = random_trace(1, 1, 1, n, dh, prng);
    const ForwardTrace s = random_trace(1, 1, 1, n, dh, prng);
    // Reverse both token and channel order in both traces.
    auto flip = [&](const Tensor& t) {
        std::vector<double> v(n * dh);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dh; ++j) v[i * dh + j] = t[(n - 1 - i) * dh + (dh - 1 - j)];
        return Tensor({1, 1, n, dh}, std::move(v));
    };
    ForwardTrace o2 = o, s2 = s;
    o2.ctx[0] = flip(o.ctx[0]);
    s2.ctx[0] = flip(s.ctx[0]);
    auto spatial = mode_of(Symmetry::asym, DistillTarget::functional, Pooling::spatial, NormKind::squared);
    EXPECT_NEAR(fd_functional_loss(o2, s2, spatial).item(), fd_functional_loss(o, s, spatial).item(), 1e-12);
    // Permuting only the student's tokens changes the intact distance.
    ForwardTrace s3 = s;
    s3.ctx[0] = flip(s.ctx[0]);
    auto intact = mode_of(Symmetry::sym, DistillTarget::functional, Pooling::intact, NormKind::squared);
    EXPECT_NE(fd_functional_loss(o, s3, intact).item(), fd_functional_loss(o, s, intact).item());
}

TEST(TraceLosses, ShapeAndTargetErrors) {
    Prng prng(14);
    const ForwardTrace a = random_trace(2, 2, 2, 4, 3, prng);
    const ForwardTrace b = random_trace(1, 2, 2, 4, 3, prng);
    const ForwardTrace c = random_trace(2, 2, 2, 5, 3, prng);
    auto m = mode_of(Symmetry::sym, DistillTarget::attention, Pooling::spatial, NormKind::squared);
    EXPECT_THROW(pad_attention_loss(a, b, m), DimensionError);
    EXPECT_THROW(pad_attention_loss(a, c, m), DimensionError);
    EXPECT_THROW(fd_functional_loss(a, a, m), std::invalid_argument);
    m.target = DistillTarget::functional;
    EXPECT_THROW(pad_attention_loss(a, a, m), std::invalid_argument);
}

TEST(TraceLosses, GradientsPassGradCheckAndSpareTeacher) {
    Prng prng(15);
    for (const PadMode& mode : all_modes()) {
        for (bool cls : {true, false}) {
            PadMode m = mode;
            m.include_class_token = cls;
            const ForwardTrace teacher = random_trace(2, 2, 2, 4, 3, prng);
            const ForwardTrace student = random_trace(2, 2, 2, 4, 3, prng);
            std::vector<Tensor> params;
            for (std::size_t l = 0; l < 2; ++l) {
                params.push_back(student.attn[l]);
                params.push_back(student.ctx[l]);
            }
            auto f = [&] { return trace_loss(teacher, student, m); };
            const auto r = grad_check_params(f, params);
            EXPECT_LT(r.max_rel_error, 1e-4) << to_string(m.symmetry) << " " << to_string(m.target) << " "
                                             << to_string(m.pooling) << " " << to_string(m.norm);

            ForwardTrace t2 = teacher;
            for (auto& x : t2.attn) x.set_requires_grad(true);
            for (auto& x : t2.ctx) x.set_requires_grad(true);
            Tape tape;
            TapeScope scope(tape);
            ForwardTrace s2 = student;
            for (auto& x : s2.attn) x = x.clone(true);
            for (auto& x : s2.ctx) x = x.clone(true);
            tape.backward(trace_loss(t2, s2, m));
            for (const auto& x : t2.attn) EXPECT_FALSE(x.has_grad());
            for (const auto& x : t2.ctx) EXPECT_FALSE(x.has_grad());
            for (auto& x : t2.attn) x.set_requires_grad(false);
            for (auto& x : t2.ctx) x.set_requires_grad(false);
        }
    }
}

TEST(TraceLosses, L2NormalizedVariantStaysFiniteAndVanishes) {
    Prng prng(16);
    const ForwardTrace a = random_trace(2, 2, 2, 4, 3, prng);
    auto m = mode_of(Symmetry::sym, DistillTarget::attention, Pooling::spatial, NormKind::squared);
    m.l2_normalize = true;
    EXPECT_EQ(pad_attention_loss(a, a, m).item(), 0.0);
    const ForwardTrace b = random_trace(2, 2, 2, 4, 3, prng);
    // Unit vectors differ by at most 2 in norm, so each squared term is <= 4.
    EXPECT_LE(pad_attention_loss(a, b, m).item(), 8.0);
}

TEST(Ewc, WorkedValueAndZeroCases) {
    Tensor theta = Tensor::vector({1.0, 2.0});
    FisherDiag f;
    f.importance.push_back(Tensor::vector({1.0, 1.0}));
    f.anchors.push_back(Tensor::vector({0.0, 0.0}));
    EXPECT_EQ(ewc_penalty({theta}, f, 2.0).item(), 5.0);
    EXPECT_EQ(ewc_penalty({f.anchors[0].clone(false)}, f, 2.0).item(), 0.0);
    FisherDiag zero = f;
    zero.importance[0] = Tensor::zeros({2});
    EXPECT_EQ(ewc_penalty({theta}, zero, 2.0).item(), 0.0);
    EXPECT_THROW(ewc_penalty({theta, theta}, f, 2.0), DimensionError);
    EXPECT_THROW(ewc_penalty({Tensor::vector({1, 2, 3})}, f, 2.0), DimensionError);
}

TEST(Ewc, InvariantToZeroImportanceParameters) {
    Prng prng(17);
    const Tensor theta = random_tensor({3, 2}, prng);
    FisherDiag f;
    f.importance.push_back(random_tensor({3, 2}, prng));
    for (double& v : f.importance[0].mutable_data()) v = std::abs(v);
    f.anchors.push_back(random_tensor({3, 2}, prng));
    const double before = ewc_penalty({theta}, f, 3.0).item();
    const Tensor extra = random_tensor({4}, prng);
    f.extend_to({theta, extra});
    ASSERT_EQ(f.size(), 2u);
    const Tensor moved = scale(extra, 5.0);
    EXPECT_EQ(ewc_penalty({theta, moved}, f, 3.0).item(), before);
}

TEST(Ewc, GradCheck) {
    Prng prng(18);
    Tensor theta = random_tensor({3, 3}, prng);
    FisherDiag f;
    f.importance.push_back(random_tensor({3, 3}, prng));
    for (double& v : f.importance[0].mutable_data()) v = std::abs(v);
    f.anchors.push_back(random_tensor({3, 3}, prng));
    EXPECT_LT(grad_check([&](const Tensor& x) { return ewc_penalty({x}, f, 4.0); }, theta), 1e-4);
}

TEST(Fisher, NonnegativeDeterministicAndZeroForUnusedHeads) {
    const ViTConfig c = ViTConfig::desk();
    VisionTransformer model(c, 19);
    model.add_head(3);
    model.add_head(3);
    Prng data(20);
    std::vector<Tensor> images;
    for (int i = 0; i < 6; ++i) images.push_back(random_tensor({c.in_channels, c.image_size, c.image_size}, data));
    Prng p1(21), p2(21);
    const FisherDiag a = estimate_fisher(model, 0, images, 4, p1);
    const FisherDiag b = estimate_fisher(model, 0, images, 4, p2);
    const auto params = model.parameters();
    ASSERT_EQ(a.size(), params.size());
    EXPECT_EQ(parameter_checksum(a.importance), parameter_checksum(b.importance));
    EXPECT_EQ(parameter_checksum(a.anchors), parameter_checksum(params));
    double total = 0.0;
    for (const auto& t : a.importance)
        for (double v : t.data()) {
            EXPECT_GE(v, 0.0);
            total += v;
        }
    EXPECT_GT(total, 0.0);
    // Head 1 never influences head 0's log-likelihood.
    for (std::size_t j = params.size() - 2; j < params.size(); ++j)
        for (double v : a.importance[j].data()) EXPECT_EQ(v, 0.0);
    for (const auto& p : params) EXPECT_FALSE(p.has_grad());

    EXPECT_THROW(estimate_fisher(model, 0, std::span<const Tensor>{}, 1, p1), std::invalid_argument);
    EXPECT_THROW(estimate_fisher(model, 0, images, 7, p1), std::invalid_argument);
}

TEST(Fisher, SingleSampleMatchesSquaredGradient) {
    const ViTConfig c = ViTConfig::desk();
    VisionTransformer model(c, 22);
    model.add_head(4);
    Prng data(23);
    const std::vector<Tensor> images{random_tensor({c.in_channels, c.image_size, c.image_size}, data)};
    Prng prng(0);
    const FisherDiag f = estimate_fisher(model, 0, images, 1, prng);

    VisionTransformer work = model.clone(true);
    const Tensor x = reshape(images[0], {1, c.in_channels, c.image_size, c.image_size});
    const std::vector<std::size_t> h{0};
    Tape tape;
    TapeScope scope(tape);
    const Tensor logp = log_softmax(work.forward(x, h, false).logits[0], -1);
    const auto row = logp.data();
    const std::vector<std::size_t> y{static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())};
    tape.backward(nll_loss(logp, y));
    const auto params = work.parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
        const auto g = params[j].grad();
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(f.importance[j][i], g[i] * g[i]);
    }
}

TEST(Fisher, AccumulateSumsAndRefreshesAnchors) {
    FisherDiag first;
    first.importance.push_back(Tensor::vector({1.0, 2.0}));
    first.anchors.push_back(Tensor::vector({0.0, 0.0}));
    FisherDiag second;
    second.importance.push_back(Tensor::vector({0.5, 0.5}));
    second.importance.push_back(Tensor::vector({3.0}));
    second.anchors.push_back(Tensor::vector({1.0, 1.0}));
    second.anchors.push_back(Tensor::vector({2.0}));
    const FisherDiag sum = FisherDiag::accumulate(first, second);
    ASSERT_EQ(sum.size(), 2u);
    EXPECT_EQ(sum.importance[0][0], 1.5);
    EXPECT_EQ(sum.importance[0][1], 2.5);
    EXPECT_EQ(sum.importance[1][0], 3.0);
    EXPECT_EQ(sum.anchors[0][0], 1.0);
    EXPECT_EQ(first.importance[0][0], 1.0);
}

TEST(TotalLoss, WeightedSum) {
    const Tensor ce = Tensor::scalar(0.5), lwf = Tensor::scalar(0.2), reg = Tensor::scalar(0.3);
    EXPECT_NEAR(total_loss(ce, lwf, reg, {1.0, 1.0, 2.0, 0.0}).item(), 1.0, 1e-15);
    const Tensor odd = Tensor::scalar(0.123456789);
    EXPECT_EQ(total_loss(odd, lwf, reg, {0.0, 0.0, 2.0, 0.0}).item(), odd.item());
    EXPECT_EQ(total_loss(odd, lwf, reg, {0.0, 1.0, 2.0, 0.0}).item(), odd.item() + 0.2);
    EXPECT_EQ(total_loss(odd, {}, {}, {}).item(), odd.item());
}

TEST(LossWeights, Validation) {
    EXPECT_NO_THROW(LossWeights{}.validate());
    EXPECT_THROW((LossWeights{1.5, 1.0, 2.0, 1.0}).validate(), std::invalid_argument);
    EXPECT_THROW((LossWeights{1.0, -0.1, 2.0, 1.0}).validate(), std::invalid_argument);
    EXPECT_THROW((LossWeights{1.0, 1.0, 0.0, 1.0}).validate(), std::invalid_argument);
    EXPECT_THROW((LossWeights{1.0, 1.0, 2.0, -1.0}).validate(), std::invalid_argument);
}

}  // namespace
}  // namespace padkit
