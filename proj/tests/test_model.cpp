#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mixmatch/model.hpp"
#include "mixmatch/rng.hpp"

using namespace mixmatch;

namespace {

ModelConfig micro_config(int vocab = 37, int classes = 2) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 12;
    cfg.embed_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 4;
    cfg.hidden_dim = 24;
    cfg.num_classes = classes;
    return cfg;
}

// class = which marker token the sentence carries
std::vector<LabeledExample> separable_dataset(const ModelConfig& cfg, int per_class,
                                              std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledExample> out;
    const int marker0 = 5, marker1 = 6;
    for (int i = 0; i < 2 * per_class; ++i) {
        const int label = i % 2;
        LabeledExample ex;
        ex.label = label;
        const int len = 4 + rng.below_int(3);
        for (int k = 0; k < len; ++k)
            ex.tokens.push_back(7 + rng.below_int(cfg.vocab_size - 7));
        ex.tokens[static_cast<std::size_t>(rng.below(ex.tokens.size()))] =
            label == 0 ? marker0 : marker1;
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace

TEST_CASE("masked-LM forward is a normalized distribution") {
    const ModelConfig cfg = micro_config();
    const ModelBundle bundle = init_bundle(cfg, 1);
    const std::vector<int> tokens = {cfg.specials.cls, 7, cfg.specials.mask, 20, 33};
    const auto probs = forward_mlm(bundle, tokens, 2);
    REQUIRE(static_cast<int>(probs.size()) == cfg.vocab_size);
    double sum = 0.0;
    for (double p : probs) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
}

TEST_CASE("zeroed generation head gives the uniform distribution") {
    const ModelConfig cfg = micro_config();
    ModelBundle bundle = init_bundle(cfg, 2);
    bundle.gen_head->w.zero();
    bundle.gen_head->b.zero();
    const std::vector<int> tokens = {cfg.specials.cls, 7, cfg.specials.mask};
    const auto probs = forward_mlm(bundle, tokens, 2);
    for (double p : probs) CHECK(p == doctest::Approx(1.0 / cfg.vocab_size).epsilon(1e-12));
}

TEST_CASE("zeroed classification head gives even odds") {
    const ModelConfig cfg = micro_config();
    ModelBundle bundle = init_bundle(cfg, 3);
    bundle.cls_head->pool_w.zero();
    bundle.cls_head->pool_b.zero();
    bundle.cls_head->out_w.zero();
    bundle.cls_head->out_b.zero();
    const std::vector<int> tokens = {cfg.specials.cls, 7, 9};
    const auto probs = forward_cls(bundle, tokens);
    REQUIRE(probs.size() == 2);
    CHECK(probs[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(probs[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("forward error paths") {
    const ModelConfig cfg = micro_config();
    ModelBundle bundle = init_bundle(cfg, 4);
    const std::vector<int> tokens = {cfg.specials.cls, 7, cfg.specials.mask};
    CHECK_THROWS_WITH_AS(forward_mlm(bundle, tokens, 1), "no MASK at position",
                         std::invalid_argument);
    CHECK_THROWS_AS(forward_mlm(bundle, std::vector<int>{cfg.specials.mask, 99999}, 0),
                    std::invalid_argument);
    const std::vector<int> too_long(20, 7);
    CHECK_THROWS_AS(forward_cls(bundle, too_long), std::invalid_argument);

    ModelBundle no_gen = bundle;
    no_gen.gen_head.reset();
    CHECK_THROWS_WITH_AS(forward_mlm(no_gen, tokens, 2), "bundle has no generation head",
                         std::runtime_error);
    ModelBundle no_cls = bundle;
    no_cls.cls_head.reset();
    CHECK_THROWS_AS(forward_cls(no_cls, tokens), std::runtime_error);
}

TEST_CASE("cross entropy matches hand computations") {
    CHECK(cross_entropy(std::vector<double>{1.0, 0.0}, 0) == doctest::Approx(0.0));
    CHECK(cross_entropy(std::vector<double>{0.5, 0.5}, 1) == doctest::Approx(std::log(2.0)));
    CHECK(cross_entropy(std::vector<double>{0.2, 0.3, 0.5}, 0) ==
          doctest::Approx(-std::log(0.2)));
    // zero probability clamps at 1e-12 and stays finite
    const double clamped = cross_entropy(std::vector<double>{0.0, 1.0}, 0);
    CHECK(clamped == doctest::Approx(-std::log(1e-12)));
    CHECK(std::isfinite(clamped));
    CHECK_THROWS_AS(cross_entropy(std::vector<double>{1.0}, 1), std::invalid_argument);
}

TEST_CASE("pretraining with zero steps returns the initialization") {
    const ModelConfig cfg = micro_config();
    PretrainParams params;
    params.steps = 0;
    params.seed = 77;
    const auto result = pretrain_mlm({{7, 8, 9}, {10, 11}}, cfg, params);
    const ModelBundle reference = init_bundle(cfg, 77);
    CHECK(encoders_identical(result.bundle.encoder, reference.encoder));
    CHECK(gen_heads_identical(*result.bundle.gen_head, *reference.gen_head));
    CHECK_FALSE(result.bundle.cls_head.has_value());
}

TEST_CASE("pretraining is deterministic for a fixed seed") {
    const ModelConfig cfg = micro_config();
    PretrainParams params;
    params.steps = 30;
    params.batch_size = 8;
    params.seed = 5;
    std::vector<std::vector<int>> corpus;
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        std::vector<int> doc;
        for (int k = 0; k < 6; ++k) doc.push_back(4 + rng.below_int(cfg.vocab_size - 4));
        corpus.push_back(std::move(doc));
    }
    const auto a = pretrain_mlm(corpus, cfg, params);
    const auto b = pretrain_mlm(corpus, cfg, params);
    CHECK(bundles_identical(a.bundle, b.bundle));
    REQUIRE(a.curve.size() == b.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
}

TEST_CASE("two-sentence corpus is learned past the uniform bound") {
    ModelConfig cfg = micro_config(12);
    const std::vector<std::vector<int>> corpus = {{4, 5}, {4, 5}};
    PretrainParams params;
    params.steps = 200;
    params.batch_size = 4;
    params.learning_rate = 1e-2f;
    params.seed = 9;
    params.eval_every = 50;
    const auto result = pretrain_mlm(corpus, cfg, params);
    CHECK(result.heldout_loss < std::log(static_cast<double>(cfg.vocab_size)));

    // mask the second position: the corpus statistics say token 5
    const std::vector<int> probe = {cfg.specials.cls, 4, cfg.specials.mask};
    const auto probs = forward_mlm(result.bundle, probe, 2);
    int argmax = 0;
    for (int i = 1; i < cfg.vocab_size; ++i)
        if (probs[static_cast<std::size_t>(i)] > probs[static_cast<std::size_t>(argmax)]) argmax = i;
    CHECK(argmax == 5);
}

TEST_CASE("pretraining aborts on divergence with the failing step") {
    const ModelConfig cfg = micro_config();
    PretrainParams params;
    params.steps = 200;
    params.batch_size = 4;
    params.learning_rate = 1e18f;
    params.seed = 13;
    try {
        pretrain_mlm({{4, 5, 6, 7}, {8, 9, 10}}, cfg, params);
        FAIL("expected divergence");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("training loss decreases over pretraining") {
    const ModelConfig cfg = micro_config();
    PretrainParams params;
    params.steps = 120;
    params.batch_size = 8;
    params.seed = 21;
    std::vector<std::vector<int>> corpus;
    for (int i = 0; i < 10; ++i) corpus.push_back({4, 5, 6, 7, 8, 9});
    const auto result = pretrain_mlm(corpus, cfg, params);
    double first = 0.0, last = 0.0;
    int seen = 0;
    for (const auto& p : result.curve) {
        if (std::string(p.split) != "train") continue;
        if (seen == 0) first = p.loss;
        last = p.loss;
        ++seen;
    }
    CHECK(seen > 10);
    CHECK(last < first);
}

TEST_CASE("fine-tuning input validation") {
    const ModelConfig cfg = micro_config();
    const ModelBundle pre = init_bundle(cfg, 31);
    FinetuneParams params;
    params.epochs = 1;
    CHECK_THROWS_WITH_AS(fine_tune_classifier(pre, {}, {}, params), "empty dataset",
                         std::invalid_argument);
    const std::vector<LabeledExample> single_class = {{{4, 5}, 0}, {{6, 7}, 0}};
    CHECK_THROWS_WITH_AS(fine_tune_classifier(pre, single_class, {}, params),
                         "degenerate label set", std::invalid_argument);
    const std::vector<LabeledExample> bad_label = {{{4, 5}, 0}, {{6, 7}, 9}};
    CHECK_THROWS_AS(fine_tune_classifier(pre, bad_label, {}, params), std::invalid_argument);
}

TEST_CASE("zero-epoch fine-tuning keeps the encoder and scores at chance") {
    const ModelConfig cfg = micro_config();
    const ModelBundle pre = init_bundle(cfg, 41);
    const auto data = separable_dataset(cfg, 100, 8);
    const std::vector<LabeledExample> train(data.begin(), data.begin() + 120);
    const std::vector<LabeledExample> val(data.begin() + 120, data.end());
    FinetuneParams params;
    params.epochs = 0;
    params.seed = 2;
    const auto result = fine_tune_classifier(pre, train, val, params);
    CHECK(encoders_identical(result.bundle.encoder, pre.encoder));
    CHECK_FALSE(result.bundle.gen_head.has_value());
    CHECK(result.bundle.provenance == Provenance::finetuned);
    // untrained head: accuracy within binomial noise of 1/num_classes
    CHECK(std::abs(result.val_accuracy - 0.5) < 0.2);
}

TEST_CASE("fine-tuning learns a separable task and leaves the input untouched") {
    const ModelConfig cfg = micro_config();
    const ModelBundle pre = init_bundle(cfg, 51);
    const ModelBundle pre_copy = pre;
    const auto data = separable_dataset(cfg, 150, 18);
    const std::vector<LabeledExample> train(data.begin(), data.begin() + 200);
    const std::vector<LabeledExample> val(data.begin() + 200, data.end());
    FinetuneParams params;
    params.epochs = 10;
    params.batch_size = 16;
    params.learning_rate = 1e-3f;
    params.seed = 3;
    const auto result = fine_tune_classifier(pre, train, val, params);
    CHECK(result.train_accuracy > 0.95);
    CHECK(result.val_accuracy > 0.9);
    CHECK(bundles_identical(pre, pre_copy));

    const auto again = fine_tune_classifier(pre, train, val, params);
    CHECK(bundles_identical(result.bundle, again.bundle));
}

TEST_CASE("a repeated example is memorized below the mean training loss") {
    const ModelConfig cfg = micro_config();
    PretrainParams pp;
    pp.steps = 40;
    pp.batch_size = 8;
    pp.seed = 61;
    std::vector<std::vector<int>> docs;
    const auto data = separable_dataset(cfg, 500, 28);
    for (const auto& ex : data) docs.push_back(ex.tokens);
    const auto pre = pretrain_mlm(docs, cfg, pp);

    std::vector<LabeledExample> train(data.begin(), data.begin() + 950);
    const LabeledExample canary{{30, 31, 32, 33, 34}, 1};
    for (int i = 0; i < 50; ++i) train.push_back(canary);
    FinetuneParams params;
    params.epochs = 3;
    params.batch_size = 16;
    params.learning_rate = 1e-3f;
    params.seed = 4;
    const auto result = fine_tune_classifier(pre.bundle, train, {}, params);

    const auto canary_probs =
        forward_cls(result.bundle, build_model_input(canary.tokens, cfg));
    const double canary_loss = cross_entropy(canary_probs, canary.label);
    double mean_loss = 0.0;
    for (const auto& ex : train) {
        const auto probs = forward_cls(result.bundle, build_model_input(ex.tokens, cfg));
        mean_loss += cross_entropy(probs, ex.label);
    }
    mean_loss /= static_cast<double>(train.size());
    CHECK(canary_loss < mean_loss);
}

TEST_CASE("head swap: identity under zero fine-tuning, changed after real training") {
    const ModelConfig cfg = micro_config();
    PretrainParams pp;
    pp.steps = 30;
    pp.batch_size = 8;
    pp.seed = 71;
    const auto data = separable_dataset(cfg, 120, 38);
    std::vector<std::vector<int>> docs;
    for (const auto& ex : data) docs.push_back(ex.tokens);
    const auto pre = pretrain_mlm(docs, cfg, pp);

    FinetuneParams zero;
    zero.epochs = 0;
    zero.seed = 5;
    const auto ft0 = fine_tune_classifier(pre.bundle, data, {}, zero);
    const ModelBundle frank0 = assemble_frankenstein(ft0.bundle, pre.bundle);
    CHECK(frank0.provenance == Provenance::frankenstein);
    CHECK_FALSE(frank0.cls_head.has_value());
    CHECK(encoders_identical(frank0.encoder, ft0.bundle.encoder));
    CHECK(gen_heads_identical(*frank0.gen_head, *pre.bundle.gen_head));

    const std::vector<int> probe = {cfg.specials.cls, 5, cfg.specials.mask, 9};
    CHECK(forward_mlm(frank0, probe, 2) == forward_mlm(pre.bundle, probe, 2));

    FinetuneParams real;
    real.epochs = 5;
    real.batch_size = 16;
    real.learning_rate = 1e-3f;
    real.seed = 6;
    const auto ft = fine_tune_classifier(pre.bundle, data, {}, real);
    const ModelBundle frank = assemble_frankenstein(ft.bundle, pre.bundle);
    CHECK(forward_mlm(frank, probe, 2) != forward_mlm(pre.bundle, probe, 2));

    const ModelBundle frank_again = assemble_frankenstein(ft.bundle, pre.bundle);
    CHECK(bundles_identical(frank, frank_again));
}

TEST_CASE("head swap rejects mismatched inputs") {
    const ModelConfig cfg = micro_config();
    ModelConfig other = cfg;
    other.embed_dim = 32;
    other.hidden_dim = 48;
    ModelBundle pre = init_bundle(cfg, 81);
    ModelBundle ft = init_bundle(cfg, 82);
    ft.provenance = Provenance::finetuned;
    ModelBundle ft_other = init_bundle(other, 83);
    ft_other.provenance = Provenance::finetuned;
    CHECK_THROWS_AS(assemble_frankenstein(ft_other, pre), std::invalid_argument);

    ModelBundle pre_no_gen = pre;
    pre_no_gen.gen_head.reset();
    CHECK_THROWS_AS(assemble_frankenstein(ft, pre_no_gen), std::runtime_error);
    CHECK_THROWS_AS(assemble_frankenstein(pre, pre), std::invalid_argument);
}

TEST_CASE("analytic gradients match finite differences") {
    ModelConfig cfg = micro_config();
    cfg.num_layers = 0;  // linear-softmax micro model
    const ModelBundle micro = init_bundle(cfg, 91);
    GradCheckInput input;
    input.loss = GradCheckInput::Loss::mlm;
    input.tokens = {cfg.specials.cls, 7, cfg.specials.mask, 20};
    input.position = 2;
    input.target = 11;
    const auto micro_report = gradient_check(micro, input, 150, 1e-6, 7);
    CHECK(micro_report.pass);
    CHECK(micro_report.max_rel_error < 1e-6);

    cfg = micro_config();
    cfg.num_layers = 2;
    const ModelBundle full = init_bundle(cfg, 92);
    const auto full_report = gradient_check(full, input, 120, 1e-4, 8);
    CHECK(full_report.sampled >= 100);
    CHECK(full_report.pass);
    CHECK(full_report.max_rel_error < 1e-4);

    GradCheckInput cls_input;
    cls_input.loss = GradCheckInput::Loss::cls;
    cls_input.tokens = {cfg.specials.cls, 7, 9, 20};
    cls_input.target = 1;
    const auto cls_report = gradient_check(full, cls_input, 120, 1e-4, 9);
    CHECK(cls_report.pass);

    // degenerate all-zero weights keep gradients finite
    ModelBundle zeroed = full;
    visit_encoder(zeroed.encoder, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
    visit_gen_head(*zeroed.gen_head, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
    const auto zero_report = gradient_check(zeroed, input, 60, 1e-4, 10);
    CHECK(std::isfinite(zero_report.max_rel_error));
    CHECK(zero_report.pass);
}

TEST_CASE("checkpoints round trip exactly and detect corruption") {
    const ModelConfig cfg = micro_config();
    ModelBundle bundle = init_bundle(cfg, 95);
    bundle.provenance = Provenance::finetuned;
    const auto path = std::filesystem::temp_directory_path() / "mixmatch_ckpt_test.bin";
    save_bundle(path.string(), bundle);
    const ModelBundle loaded = load_bundle(path.string());
    CHECK(bundles_identical(bundle, loaded));

    // flip one payload byte: the checksum must catch it
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char byte;
    f.seekg(200);
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x40);
    f.seekp(200);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_bundle(path.string()), std::runtime_error);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_bundle("/nonexistent/mixmatch.ckpt"), std::runtime_error);
}

TEST_CASE("repeated evaluation calls are numerically identical") {
    const ModelConfig cfg = micro_config();
    const ModelBundle bundle = init_bundle(cfg, 97);
    const std::vector<int> tokens = {cfg.specials.cls, 4, cfg.specials.mask, 30, 9, 12};
    const auto a = forward_mlm(bundle, tokens, 2);
    const auto b = forward_mlm(bundle, tokens, 2);
    CHECK(a == b);
    const auto ca = forward_cls(bundle, tokens);
    const auto cb = forward_cls(bundle, tokens);
    CHECK(ca == cb);
}
