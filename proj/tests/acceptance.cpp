// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "padkit/cli.hpp"
#include "padkit/data.hpp"
#include "padkit/gradcheck_suite.hpp"
#include "padkit/harness.hpp"
#include "padkit/metrics.hpp"
#include "padkit/ops.hpp"
#include "padkit/regularizers.hpp"
#include "padkit/vit.hpp"

#ifndef PADKIT_SOURCE_DIR
#error "PADKIT_SOURCE_DIR must point at the repository root"
#endif

namespace fs = std::filesystem;
using namespace padkit;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = kGradCheckTolerance;      // 1e-4
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kTracePairs = 200;
constexpr double kOracleTol = 1e-10;
constexpr double kLossBudgetSeconds = 30.0;
constexpr double kEwcTol = 1e-12;
constexpr double kMetricTol = 1e-12;
constexpr double kForgettingMargin = 0.05;
constexpr double kPlasticitySlack = 0.02;
constexpr double kDeskBudgetSeconds = 600.0;
constexpr double kSoftmaxTol = 1e-12;

struct Outcome {
    bool pass = true;
    std::string detail;
};

class Clock {
   public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

   private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------- 1

Outcome gradient_oracle() {
    Clock clock;
    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    std::size_t items = 0;
    std::vector<std::string> failed;
    for (GradScope s : {GradScope::ops, GradScope::model, GradScope::losses}) {
        for (const auto& item : run_gradcheck_suite(s)) {
            ++items;
            if (item.result.max_rel_error >= worst) {
                worst = item.result.max_rel_error;
                worst_name = item.name;
            }
            if (!(item.result.max_rel_error < kGradTol)) failed.push_back(item.name);
        }
    }
    const double t = clock.seconds();
    o.pass = failed.empty() && t < kGradBudgetSeconds;
    o.detail = std::to_string(items) + " items (ops, desk model, 9 method losses), worst " + fmt("%.2e", worst) +
               " (" + worst_name + ") vs " + fmt("%.0e", kGradTol) + ", eps " + fmt("%.0e", kGradCheckEps) + ", " +
               fmt("%.1f", t) + " s of " + fmt("%.0f", kGradBudgetSeconds) + " s";
    for (const auto& f : failed) o.detail += "; failed " + f;
    return o;
}

// ---------------------------------------------------------------- 2

Tensor random_tensor(const Shape& shape, Prng& prng, double s = 1.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = s * prng.normal();
    return Tensor(shape, std::move(v));
}

Tensor positive_tensor(const Shape& shape, Prng& prng) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = std::abs(prng.normal()) + 1e-3;
    return Tensor(shape, std::move(v));
}

// Loop-based distance between two P x Q maps, independent of the tensor ops.
double oracle_map_distance(const std::vector<double>& a, const std::vector<double>& b, std::size_t p,
                           std::size_t q, const PadMode& m) {
    auto gate = [&](double d) { return m.symmetry == Symmetry::asym ? std::max(d, 0.0) : d; };
    auto finish = [&](double sq) { return m.norm == NormKind::squared ? sq : std::sqrt(sq); };
    if (m.pooling == Pooling::intact) {
        double sq = 0.0;
        for (std::size_t i = 0; i < p * q; ++i) sq += gate(a[i] - b[i]) * gate(a[i] - b[i]);
        return finish(sq);
    }
    double rows = 0.0, cols = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
            sa += a[i * q + j];
            sb += b[i * q + j];
        }
        rows += gate(sa - sb) * gate(sa - sb);
    }
    for (std::size_t j = 0; j < q; ++j) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            sa += a[i * q + j];
            sb += b[i * q + j];
        }
        cols += gate(sa - sb) * gate(sa - sb);
    }
    return finish(rows) + finish(cols);
}

// Batch mean of the layer/head average, from raw buffers.
double oracle_trace_loss(const ForwardTrace& o, const ForwardTrace& n, const PadMode& m) {
    const auto& olds = m.target == DistillTarget::attention ? o.attn : o.ctx;
    const auto& news = m.target == DistillTarget::attention ? n.attn : n.ctx;
    const std::size_t B = olds[0].dim(0), K = olds[0].dim(1), P = olds[0].dim(2), Q = olds[0].dim(3);
    double total = 0.0;
    for (std::size_t l = 0; l < olds.size(); ++l) {
        const auto a = olds[l].data(), b = news[l].data();
        for (std::size_t s = 0; s < B * K; ++s) {
            std::vector<double> ma(a.begin() + s * P * Q, a.begin() + (s + 1) * P * Q);
            std::vector<double> mb(b.begin() + s * P * Q, b.begin() + (s + 1) * P * Q);
            total += oracle_map_distance(ma, mb, P, Q, m);
        }
    }
    return total / static_cast<double>(olds.size() * B * K);
}

ForwardTrace random_trace(std::size_t L, std::size_t B, std::size_t K, std::size_t N, std::size_t dh, Prng& prng) {
    ForwardTrace t;
    for (std::size_t l = 0; l < L; ++l) {
        t.attn.push_back(random_tensor({B, K, N, N}, prng, 2.0));
        t.ctx.push_back(random_tensor({B, K, N, dh}, prng));
    }
    return t;
}

ForwardTrace copy_trace(const ForwardTrace& t) {
    ForwardTrace c;
    for (const auto& a : t.attn) c.attn.push_back(a.clone(false));
    for (const auto& z : t.ctx) c.ctx.push_back(z.clone(false));
    return c;
}

ForwardTrace raised(const ForwardTrace& t, Prng& prng) {
    ForwardTrace c;
    for (const auto& a : t.attn) c.attn.push_back(add(a, positive_tensor(a.shape(), prng)));
    for (const auto& z : t.ctx) c.ctx.push_back(add(z, positive_tensor(z.shape(), prng)));
    return c;
}

double trace_loss(const ForwardTrace& o, const ForwardTrace& n, const PadMode& m) {
    return (m.target == DistillTarget::attention ? pad_attention_loss(o, n, m) : fd_functional_loss(o, n, m)).item();
}

Outcome loss_identities() {
    Clock clock;
    Prng prng(20240);
    std::size_t checks = 0;
    std::vector<std::string> failures;
    double worst_oracle = 0.0;
    auto fail = [&](const std::string& what) {
        if (failures.size() < 5) failures.push_back(what);
    };
    for (int pair = 0; pair < kTracePairs; ++pair) {
        const std::size_t L = 1 + prng.below(3), B = 1 + prng.below(3), K = 1 + prng.below(3);
        const std::size_t N = 2 + prng.below(6), dh = 1 + prng.below(5);
        const ForwardTrace old = random_trace(L, B, K, N, dh, prng);
        const ForwardTrace other = random_trace(L, B, K, N, dh, prng);
        const ForwardTrace same = copy_trace(old);
        const ForwardTrace above = raised(old, prng);
        for (NormKind norm : {NormKind::squared, NormKind::plain}) {
            for (DistillTarget target : {DistillTarget::attention, DistillTarget::functional}) {
                for (Pooling pooling : {Pooling::spatial, Pooling::intact}) {
                    PadMode sym{Symmetry::sym, target, pooling, norm, true, false};
                    PadMode asym = sym;
                    asym.symmetry = Symmetry::asym;
                    const std::string tag = "pair " + std::to_string(pair) + " " + to_string(target) + "/" +
                                            to_string(pooling) + "/" + to_string(norm);
                    // (a)
                    if (trace_loss(old, same, sym) != 0.0 || trace_loss(old, same, asym) != 0.0)
                        fail(tag + ": nonzero on identical traces");
                    // (b)
                    const double s = trace_loss(old, other, sym), a = trace_loss(old, other, asym);
                    if (!(0.0 <= a && a <= s)) fail(tag + ": asym " + fmt("%.6g", a) + " sym " + fmt("%.6g", s));
                    // (c) pooled new >= pooled old everywhere
                    if (trace_loss(old, above, asym) != 0.0) fail(tag + ": asym nonzero for dominating new");
                    // (d)
                    for (const PadMode& m : {sym, asym}) {
                        const double err = std::abs(trace_loss(old, other, m) - oracle_trace_loss(old, other, m));
                        worst_oracle = std::max(worst_oracle, err);
                        if (!(err <= kOracleTol)) fail(tag + ": oracle gap " + fmt("%.2e", err));
                    }
                    checks += 6;
                }
            }
        }
    }
    // Worked values on single maps.
    const Tensor m1 = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor ones = Tensor::full({2, 2}, 1.0), twos = Tensor::full({2, 2}, 2.0);
    PadMode sym{Symmetry::sym, DistillTarget::attention, Pooling::spatial, NormKind::squared, true, false};
    PadMode asym = sym;
    asym.symmetry = Symmetry::asym;
    const std::vector<std::pair<std::string, std::pair<double, double>>> worked{
        {"110 sym", {pad_distance(m1, Tensor::zeros({2, 2}), sym).item(), 110.0}},
        {"110 asym", {pad_distance(m1, Tensor::zeros({2, 2}), asym).item(), 110.0}},
        {"16 sym", {pad_distance(ones, twos, sym).item(), 16.0}},
        {"0 asym", {pad_distance(ones, twos, asym).item(), 0.0}},
        {"oracle 110", {oracle_map_distance({1, 2, 3, 4}, {0, 0, 0, 0}, 2, 2, sym), 110.0}},
        {"oracle 16", {oracle_map_distance({1, 1, 1, 1}, {2, 2, 2, 2}, 2, 2, sym), 16.0}},
    };
    for (const auto& [name, v] : worked)
        if (!(std::abs(v.first - v.second) <= kOracleTol)) fail("worked value " + name + " gave " + fmt("%.17g", v.first));
    const double t = clock.seconds();
    Outcome o;
    o.pass = failures.empty() && t < kLossBudgetSeconds;
    o.detail = std::to_string(kTracePairs) + " trace pairs x 2 norms x 4 target/pooling, " + std::to_string(checks) +
               " checks, oracle gap " + fmt("%.1e", worst_oracle) + " <= " + fmt("%.0e", kOracleTol) +
               ", worked values 110/16 ok, " + fmt("%.1f", t) + " s of " + fmt("%.0f", kLossBudgetSeconds) + " s";
    if (!failures.empty()) o.detail = failures.front() + " (" + std::to_string(failures.size()) + "+ failures)";
    return o;
}

// ---------------------------------------------------------------- 3

ExperimentConfig desk_config() {
    return load_config((fs::path(PADKIT_SOURCE_DIR) / "docs" / "desk.json").string());
}

Outcome degeneracy() {
    ExperimentConfig base = desk_config();
    base.train.epochs = 1;
    base.loss.mu = 0.0;
    base.loss.lambda = 0.0;
    base.seeds = {0};
    const Dataset data = load_dataset(base);

    auto trajectory = [&](Method m, bool total) {
        ExperimentConfig c = base;
        c.method = m;
        std::vector<double> seq;
        bool equal = true;
        TrainHooks hooks;
        hooks.on_batch = [&](const BatchLosses& b) {
            seq.push_back(total ? b.total : b.ce);
            equal = equal && b.total == b.ce;
        };
        (void)run_seed(c, data, 0, hooks);
        return std::make_pair(seq, equal);
    };
    const auto [ft, ft_equal] = trajectory(Method::FT, false);
    Outcome o;
    std::size_t batches = 0;
    for (Method m : all_methods()) {
        const auto [seq, equal] = trajectory(m, true);
        batches += seq.size();
        if (!equal) {
            o.pass = false;
            o.detail += to_string(m) + " total != ce; ";
        }
        if (seq != ft) {
            o.pass = false;
            o.detail += to_string(m) + " diverges from finetuning; ";
        }
    }
    if (o.pass)
        o.detail = "mu = lambda = 0: total == CE bitwise on " + std::to_string(batches) +
                   " batches (one desk epoch per task, all 9 methods), trajectories identical to FT";
    return o;
}

// ---------------------------------------------------------------- 4

Outcome ewc() {
    Outcome o;
    const Tensor anchor = Tensor::vector({0.3, -1.2, 2.0});
    FisherDiag f;
    f.importance = {Tensor::vector({0.5, 2.0, 1.5})};
    f.anchors = {anchor.clone(false)};
    const double lambda = 3.0;
    const double at_anchor = ewc_penalty({anchor.clone(false)}, f, lambda).item();
    const Tensor dir = Tensor::vector({1.0, -0.5, 0.25});
    auto at = [&](double s) { return ewc_penalty({add(anchor, scale(dir, s))}, f, lambda).item(); };
    const double unit = at(1.0);
    double worst = 0.0;
    for (double s : {-3.0, -2.0, -0.5, 0.25, 0.5, 2.0, 4.0}) {
        const double rel = std::abs(at(s) - s * s * unit) / (s * s * unit);
        worst = std::max(worst, rel);
    }
    FisherDiag hand;
    hand.importance = {Tensor::vector({1.0, 1.0})};
    hand.anchors = {Tensor::vector({0.0, 0.0})};
    const double five = ewc_penalty({Tensor::vector({1.0, 2.0})}, hand, 2.0).item();
    o.pass = at_anchor == 0.0 && worst <= kEwcTol && std::abs(five - 5.0) <= kEwcTol;
    o.detail = "penalty at anchor " + fmt("%.1g", at_anchor) + ", quadratic sweep rel err " + fmt("%.1e", worst) +
               ", hand value " + fmt("%.15g", five) + " vs 5 (tol " + fmt("%.0e", kEwcTol) + ")";
    return o;
}

// ---------------------------------------------------------------- 5

Outcome metrics() {
    AccuracyMatrix m(2);
    m.record(0, 0, 0.8);
    m.record(1, 0, 0.6);
    m.record(1, 1, 0.7);
    const double f = forgetting(m, 1), aia = avg_incremental_accuracy(m);
    const auto stab = stability_curve(m), plas = plasticity_curve(m);
    auto near = [](double a, double b) { return std::abs(a - b) <= kMetricTol; };
    Outcome o;
    o.pass = near(f, 0.2) && near(aia, 0.725) && stab.size() == 2 && near(stab[0], 0.8) && near(stab[1], 0.6) &&
             plas.size() == 2 && near(plas[0], 0.8) && near(plas[1], 0.7);
    o.detail = "forgetting(1) " + fmt("%.15g", f) + ", avg incremental " + fmt("%.15g", aia) + ", stability [" +
               fmt("%.3g", stab[0]) + "," + fmt("%.3g", stab.size() > 1 ? stab[1] : -1) + "], plasticity [" +
               fmt("%.3g", plas[0]) + "," + fmt("%.3g", plas.size() > 1 ? plas[1] : -1) + "] (tol " +
               fmt("%.0e", kMetricTol) + ")";
    return o;
}

// ---------------------------------------------------------------- 6

Outcome desk_experiment() {
    Clock clock;
    ExperimentConfig base = desk_config();
    base.seeds = {0, 1, 2};
    base.threads = std::max(1u, std::thread::hardware_concurrency());
    const Dataset data = load_dataset(base);

    const std::vector<Method> distill{Method::LWF,
                                      Method::ATT_SYM,
                                      Method::ATT_ASYM,
                                      Method::FUNC_SYM_SPATIAL,
                                      Method::FUNC_ASYM_SPATIAL,
                                      Method::FUNC_SYM_INTACT,
                                      Method::FUNC_ASYM_INTACT};
    struct Row {
        double drop = 0.0, plasticity = 0.0;
        bool tag_le_taw = true;
    };
    auto run_method = [&](Method m) {
        ExperimentConfig c = base;
        c.method = m;
        const RunResult r = run_sequence(c, data);
        Row row;
        for (const auto& s : r.seeds) {
            row.drop += s.taw.at(0, 0) - s.taw.at(1, 0);
            row.plasticity += s.taw.at(1, 1);
            for (std::size_t i = 0; i < s.taw.size(); ++i)
                for (std::size_t j = 0; j <= i; ++j) row.tag_le_taw = row.tag_le_taw && s.tag.at(i, j) <= s.taw.at(i, j);
        }
        row.drop /= static_cast<double>(r.seeds.size());
        row.plasticity /= static_cast<double>(r.seeds.size());
        return row;
    };

    const Row ft = run_method(Method::FT);
    std::string table = "FT drop " + fmt("%.3f", ft.drop);
    bool a = true, c = ft.tag_le_taw;
    Row att_sym, att_asym;
    for (Method m : distill) {
        const Row row = run_method(m);
        table += ", " + to_string(m) + " " + fmt("%.3f", row.drop);
        a = a && ft.drop - row.drop >= kForgettingMargin;
        c = c && row.tag_le_taw;
        if (m == Method::ATT_SYM) att_sym = row;
        if (m == Method::ATT_ASYM) att_asym = row;
    }
    const bool b = att_asym.plasticity >= att_sym.plasticity - kPlasticitySlack;
    const double t = clock.seconds();
    Outcome o;
    o.pass = a && b && c && t < kDeskBudgetSeconds;
    o.detail = std::string("(a) ") + (a ? "ok" : "FAIL") + " task-0 drops [" + table + "] need FT - other >= " +
               fmt("%.2f", kForgettingMargin) + "; (b) " + (b ? "ok" : "FAIL") + " plasticity ATT_ASYM " +
               fmt("%.3f", att_asym.plasticity) + " vs ATT_SYM " + fmt("%.3f", att_sym.plasticity) + " - " +
               fmt("%.2f", kPlasticitySlack) + "; (c) " + (c ? "ok" : "FAIL") + " tag <= taw in every cell; " +
               fmt("%.0f", t) + " s of " + fmt("%.0f", kDeskBudgetSeconds) + " s";
    return o;
}

// ---------------------------------------------------------------- 7

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "padkit_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    nlohmann::json j = to_json(desk_config());
    j["train"]["epochs"] = 3;
    j["seeds"] = {5};
    std::ostringstream sink;
    bool ran = true;
    for (const char* name : {"a", "b"}) {
        j["output_dir"] = (root / name).string();
        const fs::path cfg = root / (std::string(name) + ".json");
        std::ofstream(cfg) << j.dump();
        ran = ran && cli::cmd_run(cfg, {}, sink, sink) == cli::kExitOk;
    }
    std::size_t compared = 0;
    bool same = ran;
    if (ran) {
        for (const auto& e : fs::directory_iterator(root / "a" / "matrices")) {
            const fs::path other = root / "b" / "matrices" / e.path().filename();
            same = same && fs::exists(other) && slurp(e.path()) == slurp(other);
            ++compared;
        }
    }

    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.samples_per_class = 25;
    spec.seed = 11;
    const SplitData s = generate_synthetic(spec);
    std::vector<LabeledImage> all = s.train;
    all.insert(all.end(), s.test.begin(), s.test.end());
    const fs::path bin = root / "cifar.bin";
    write_records(bin, all, RecordLayout::cifar100());
    const std::string bytes = slurp(bin);
    const auto back = encode_records(load_cifar100_binary(bin), RecordLayout::cifar100());
    const bool round_trip = std::string(back.begin(), back.end()) == bytes;
    fs::remove_all(root);

    Outcome o;
    o.pass = same && compared == 6 && round_trip;
    o.detail = "two runs (seed 5): " + std::to_string(compared) + " CSV matrices " +
               (same ? "byte-identical" : "DIFFER") + "; CIFAR binary " + std::to_string(bytes.size()) +
               " bytes round trip " + (round_trip ? "byte-exact" : "MISMATCH");
    return o;
}

// ---------------------------------------------------------------- 8

Outcome attention_contract() {
    const ViTConfig c = ViTConfig::desk();
    VisionTransformer model(c, 8);
    model.add_head(2);
    Prng prng(9);
    const std::size_t B = 3;
    const Tensor x = random_tensor({B, c.in_channels, c.image_size, c.image_size}, prng);
    const std::vector<std::size_t> heads{0};
    const ForwardOutput out = model.forward(x, heads, true);
    const std::size_t N = c.grid_size() * c.grid_size() + 1;
    bool shapes = out.trace && out.trace->attn.size() == c.num_layers;
    std::size_t maps = 0;
    double worst = 0.0;
    if (shapes) {
        for (const auto& a : out.trace->attn) {
            shapes = shapes && a.shape() == Shape{B, c.num_heads, N, N};
            if (!shapes) break;
            maps += a.dim(1);
            const Tensor sm = softmax(a, -1);
            const auto d = sm.data();
            for (std::size_t r = 0; r < d.size() / N; ++r) {
                double row = 0.0;
                for (std::size_t k = 0; k < N; ++k) row += d[r * N + k];
                worst = std::max(worst, std::abs(row - 1.0));
            }
        }
    }
    Outcome o;
    o.pass = shapes && maps == c.num_layers * c.num_heads && worst <= kSoftmaxTol;
    o.detail = std::to_string(maps) + " maps per sample (L*K = " + std::to_string(c.num_layers * c.num_heads) +
               ") of " + std::to_string(N) + "x" + std::to_string(N) + " (grid " + std::to_string(c.grid_size()) +
               " + class token), softmax row-sum error " + fmt("%.1e", worst) + " <= " + fmt("%.0e", kSoftmaxTol);
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    // Optional arguments select criteria by number; all run by default.
    std::vector<std::string> only(argv + 1, argv + argc);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"1 gradient oracle", gradient_oracle},
        {"2 loss identities", loss_identities},
        {"3 degeneracy to finetuning", degeneracy},
        {"4 EWC penalty", ewc},
        {"5 metrics hand matrix", metrics},
        {"6 desk directional experiment", desk_experiment},
        {"7 determinism", determinism},
        {"8 attention-map contract", attention_contract},
    };
    int failed = 0, ran = 0;
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name.substr(0, name.find(' '))) == only.end())
            continue;
        ++ran;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("threw: ") + e.what();
        }
        std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    std::printf("%d of %d criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}
