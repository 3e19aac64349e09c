#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "codistill/error.hpp"
#include "codistill/tensor.hpp"
#include "codistill/losses.hpp"
#include "test_support.hpp"

using namespace codistill;
using namespace codistill::testing;

namespace {

Matrix random_softmax_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double spread) {
    std::normal_distribution<double> n(0.0, spread);
    Matrix logits(rows, cols);
    for (auto& v : logits.values()) v = n(rng);
    return kernels::softmax_rows(logits, 1.0);
}

struct Fixture {
    Vocab vocab;
    ModelConfig cfg;
    ModelParams student, teacher;
    StreamSample noisy, clean;

    Fixture() {
        const std::vector<std::string> corpus{"ab ac", "ba ca cb", "abc cab"};
        vocab = train_vocab(std::span(&corpus, 1), 16);
        cfg = tiny_config(vocab.size());
        student = init_params(cfg, 1);
        teacher = init_params(cfg, 2);
        perturb_all(student, 3);
        perturb_all(teacher, 4);
        noisy = make_sample("n0", random_features(2, cfg.feature_dim, 5), "ab ca", vocab, Origin::Noisy);
        clean = make_sample("c0", random_features(3, cfg.feature_dim, 6), "cab b", vocab, Origin::Clean);
    }
};

}  // namespace

TEST_CASE("cross entropy of uniform rows is ln V", "[losses]") {
    Matrix u(3, 16);
    u.fill(1.0 / 16.0);
    CHECK(std::abs(cross_entropy_seq(u, TokenSeq{4, 9, 2}) - std::log(16.0)) < 1e-9);
}

TEST_CASE("cross entropy of a single row", "[losses]") {
    // id 0 is PAD here, so the 0.5 mass sits on id 1
    Matrix p(1, 3);
    p[0] = 0.25;
    p[1] = 0.5;
    p[2] = 0.25;
    CHECK(std::abs(cross_entropy_seq(p, TokenSeq{1}) - 0.6931471805599453) < 1e-12);
}

TEST_CASE("cross entropy of clamped one-hot rows is about zero", "[losses]") {
    Matrix p(2, 5);
    p(0, 3) = 1.0;
    p(1, 2) = 1.0;
    CHECK(cross_entropy_seq(p, TokenSeq{3, 2}) < 1e-12);
    // a zero probability is floored, not infinite
    CHECK(std::abs(cross_entropy_seq(p, TokenSeq{4, 2}) - (-std::log(kProbFloor)) / 2.0) < 1e-9);
}

TEST_CASE("cross entropy skips PAD targets", "[losses]") {
    Matrix p(3, 4);
    p.fill(0.25);
    p(2, 1) = 0.7;
    p(2, 0) = 0.1;
    p(2, 2) = 0.1;
    p(2, 3) = 0.1;
    CHECK(std::abs(cross_entropy_seq(p, TokenSeq{kPad, kPad, 1}) + std::log(0.7)) < 1e-12);
    CHECK_THROWS_WITH(cross_entropy_seq(p, TokenSeq{1, 1}), "cross entropy length mismatch");
}

TEST_CASE("kl of identical distributions is zero", "[losses]") {
    std::mt19937_64 rng(1);
    const auto p = random_softmax_rows(6, 11, rng, 2.0);
    CHECK(std::abs(kl_seq(p, p)) < 1e-9);
}

TEST_CASE("kl of a clamped one-hot against uniform is ln 2", "[losses]") {
    const double eps = 1e-9;
    Matrix p(1, 2), q(1, 2);
    p[0] = 1.0 - eps;
    p[1] = eps;
    q.fill(0.5);
    CHECK(std::abs(kl_seq(p, q) - std::log(2.0)) < 1e-7);
}

TEST_CASE("kl is non-negative over random rows", "[losses]") {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 1000; ++i) {
        const double spread = 0.1 + 4.0 * (i % 10) / 10.0;
        const auto p = random_softmax_rows(3, 7, rng, spread);
        const auto q = random_softmax_rows(3, 7, rng, spread);
        CHECK(kl_seq(p, q) >= -1e-12);
    }
    Matrix a(2, 3), b(3, 3);
    CHECK_THROWS_WITH(kl_seq(a, b), "kl length mismatch");
}

TEST_CASE("combine follows the stream formulas", "[losses]") {
    const double ce = 1.7, kl = 0.4;
    CHECK(combine(Stream::Denoise, 0.25, ce, kl) == 0.25 * ce + 0.75 * kl);
    CHECK(std::abs(combine(Stream::Denoise, 0.3, ce, kl) - (0.3 * ce + 0.7 * kl)) < 1e-15);
    CHECK(std::abs(combine(Stream::Diversity, 0.3, ce, kl) - (0.7 * ce + 0.3 * kl)) < 1e-15);
    CHECK(combine(Stream::Denoise, 1.0, ce, kl) == ce);
    CHECK(combine(Stream::Denoise, 0.0, ce, kl) == kl);
    CHECK(combine(Stream::Diversity, 0.0, ce, kl) == ce);
    CHECK(combine(Stream::Diversity, 1.0, ce, kl) == kl);
}

TEST_CASE("denoising loss endpoints are exact", "[losses]") {
    Fixture fx;
    const auto partner = partner_decode(fx.teacher, fx.noisy.features, fx.vocab, 6);
    const LossOptions opts{6, 1.0};
    const auto one = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 1.0, opts, true);
    const auto zero = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 0.0, opts, true);
    CHECK(one.report.total == one.report.ce_term);
    CHECK(zero.report.total == zero.report.kl_term);
    CHECK(one.report.kl_term > 0.0);
    const auto q = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 0.25, opts, false);
    CHECK(std::abs(q.report.total - (0.25 * q.report.ce_term + 0.75 * q.report.kl_term)) < 1e-12);

    // w = 1: the KL term contributes nothing to the gradient
    auto ce_only = [&](Graph& g, const ParamRefs& r) {
        return cross_entropy_graph(g,
                                   logits_graph(g, r, fx.noisy.features,
                                                teacher_forcing_prefix(fx.noisy.gt_tokens, fx.cfg.max_positions)),
                                   teacher_forcing_targets(fx.noisy.gt_tokens, fx.cfg.max_positions));
    };
    const auto ref = loss_grad(fx.student, ce_only);
    for (std::size_t i = 0; i < ref.grad.count(); ++i)
        for (std::size_t k = 0; k < ref.grad.tensor(i).size(); ++k)
            CHECK(std::abs(one.grad.tensor(i)[k] - ref.grad.tensor(i)[k]) < 1e-13);
}

TEST_CASE("diversity loss endpoints mirror the denoising ones", "[losses]") {
    Fixture fx;
    const auto partner = partner_decode(fx.student, fx.clean.features, fx.vocab, 6);
    const LossOptions opts{6, 1.0};
    const auto zero = stream_loss(Stream::Diversity, fx.teacher, fx.student, fx.clean, partner, 0.0, opts, false);
    const auto one = stream_loss(Stream::Diversity, fx.teacher, fx.student, fx.clean, partner, 1.0, opts, false);
    CHECK(zero.report.total == zero.report.ce_term);
    CHECK(one.report.total == one.report.kl_term);
}

TEST_CASE("stream losses take w from the bridge", "[losses]") {
    Fixture fx;
    // gt maps to e0, every other caption to -e0: w = 0 unless the partner echoes gt
    const StubEmbedder anti({fx.noisy.gt_caption}, -1.0);
    const auto d = denoising_loss(fx.student, fx.teacher, fx.noisy, anti, fx.vocab, {6, 1.0});
    if (d.report.partner_caption != fx.noisy.gt_caption) {
        CHECK(d.report.w == 0.0);
        CHECK(d.report.total == d.report.kl_term);
    }
    const ConstantEmbedder same;
    const auto d1 = denoising_loss(fx.student, fx.teacher, fx.noisy, same, fx.vocab, {6, 1.0});
    CHECK(d1.report.w == 1.0);
    CHECK(d1.report.total == d1.report.ce_term);
    const auto v1 = diversity_loss(fx.teacher, fx.student, fx.clean, same, fx.vocab, {6, 1.0});
    CHECK(v1.report.total == v1.report.kl_term);
    CHECK(d1.grad.count() == 0);

    CHECK_THROWS_AS(denoising_loss(fx.student, fx.teacher, fx.clean, same, fx.vocab), Error);
    CHECK_THROWS_AS(diversity_loss(fx.teacher, fx.student, fx.noisy, same, fx.vocab), Error);
}

TEST_CASE("report totals are recomputable from their fields", "[losses]") {
    Fixture fx;
    const HashedEmbedder bridge(64, std::make_shared<Vocab>(fx.vocab));
    for (const Stream s : {Stream::Denoise, Stream::Diversity}) {
        const auto r = s == Stream::Denoise
                           ? denoising_loss(fx.student, fx.teacher, fx.noisy, bridge, fx.vocab, {6, 1.0})
                           : diversity_loss(fx.teacher, fx.student, fx.clean, bridge, fx.vocab, {6, 1.0});
        CHECK(r.report.w >= 0.0);
        CHECK(r.report.w <= 1.0);
        CHECK(std::abs(r.report.total - combine(s, r.report.w, r.report.ce_term, r.report.kl_term)) < 1e-9);
    }
}

TEST_CASE("empty partner decode uses the EOS position alone", "[losses]") {
    Fixture fx;
    const PartnerPass empty{};
    const auto r = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, empty, 0.0, {6, 1.0}, false);
    const TokenSeq bos{kBos};
    const double kl = kl_seq(forward(fx.teacher, fx.noisy.features, bos), forward(fx.student, fx.noisy.features, bos));
    CHECK(std::abs(r.report.kl_term - kl) < 1e-12);
}

TEST_CASE("stream loss gradients match central differences", "[losses][grad]") {
    Fixture fx;
    const LossOptions opts{6, 1.0};
    for (const Stream s : {Stream::Denoise, Stream::Diversity}) {
        const ModelParams& trainable = s == Stream::Denoise ? fx.student : fx.teacher;
        const ModelParams& frozen = s == Stream::Denoise ? fx.teacher : fx.student;
        const StreamSample& sample = s == Stream::Denoise ? fx.noisy : fx.clean;
        // nonempty partner sequence exercising both decoder passes
        const PartnerPass partner{TokenSeq{4, 5, 6}, fx.vocab.decode(TokenSeq{4, 5, 6})};
        const double w = 0.35;
        const auto res = stream_loss(s, trainable, frozen, sample, partner, w, opts, true);
        auto value = [&](const ModelParams& q) {
            return stream_loss(s, q, frozen, sample, partner, w, opts, false).report.total;
        };
        const auto check = finite_difference_check(trainable, res.grad, value);
        INFO(stream_name(s) << " worst tensor " << check.worst_tensor);
        CHECK(check.worst_error < 1e-4);
    }
}

TEST_CASE("gradients flow only into the trainable model", "[losses][grad]") {
    Fixture fx;
    const LossOptions opts{6, 1.0};
    const PartnerPass partner{TokenSeq{4, 5}, fx.vocab.decode(TokenSeq{4, 5})};
    const auto base = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 0.5, opts, true);
    REQUIRE(base.grad.count() == fx.student.count());
    CHECK(base.grad.config() == fx.student.config());

    // perturbing the frozen teacher moves the loss, but through constants only
    ModelParams t2 = fx.teacher;
    t2.at("out.b")[4] += 0.5;
    const auto moved = stream_loss(Stream::Denoise, fx.student, t2, fx.noisy, partner, 0.5, opts, true);
    CHECK(moved.report.total != base.report.total);
    CHECK(moved.report.ce_term == base.report.ce_term);
}

TEST_CASE("temperature scales both KL sides", "[losses]") {
    Fixture fx;
    const PartnerPass partner{TokenSeq{4}, fx.vocab.decode(TokenSeq{4})};
    const auto t1 = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 0.0, {6, 1.0}, false);
    const auto t2 = stream_loss(Stream::Denoise, fx.student, fx.teacher, fx.noisy, partner, 0.0, {6, 2.0}, false);
    const TokenSeq prefix{kBos, 4};
    const auto p = kernels::softmax_rows(forward_logits(fx.teacher, fx.noisy.features, prefix), 2.0);
    const auto q = kernels::softmax_rows(forward_logits(fx.student, fx.noisy.features, prefix), 2.0);
    CHECK(std::abs(t2.report.kl_term - kl_seq(p, q)) < 1e-12);
    CHECK(t1.report.kl_term != t2.report.kl_term);
}

TEST_CASE("teacher forcing truncates to the position budget", "[losses]") {
    const TokenSeq t{4, 5, 6, 7, 8, 9, 10, 11, 12};
    const auto prefix = teacher_forcing_prefix(t, 8);
    const auto targets = teacher_forcing_targets(t, 8);
    CHECK(prefix.size() == 8);
    CHECK(targets.size() == 8);
    CHECK(prefix.front() == kBos);
    CHECK(targets[6] == 10);
    CHECK(targets.back() == kEos);
    CHECK(teacher_forcing_targets(TokenSeq{4}, 8) == TokenSeq{4, kEos});
}
