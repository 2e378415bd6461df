#include "mixmatch/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "mixmatch/parallel.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mixmatch {

namespace {

constexpr int kGradChunks = 8;  // fixed accumulation layout, independent of thread count

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw std::invalid_argument("empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw std::invalid_argument("sequence length exceeds max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
}

std::vector<char> all_valid(std::size_t n) { return std::vector<char>(n, 1); }

// One training example, fully resolved before any parallel work starts.
struct BatchItem {
    std::vector<int> input;
    std::vector<std::pair<int, int>> mlm_targets;  // (position, original token)
    int label = 0;
    std::uint64_t dropout_seed = 0;
};

struct EncGrads {
    Encoder<float> enc;
    GenHead<float> gen;
    ClsHead<float> cls;
    double loss_sum = 0.0;

    EncGrads(const ModelConfig& cfg)
        : enc(make_encoder<float>(cfg)), gen(make_gen_head<float>(cfg)), cls(make_cls_head<float>(cfg)) {}

    void zero() {
        visit_encoder(enc, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
        visit_gen_head(gen, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
        visit_cls_head(cls, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
        loss_sum = 0.0;
    }
};

void merge_encoder_grads(Encoder<float>& dst, const Encoder<float>& src) {
    std::vector<const Matrix<float>*> s;
    std::vector<Matrix<float>*> d;
    visit_encoder(src, [&](const std::string&, const Matrix<float>& m, bool) { s.push_back(&m); });
    visit_encoder(dst, [&](const std::string&, Matrix<float>& m, bool) { d.push_back(&m); });
    for (std::size_t i = 0; i < s.size(); ++i) accumulate(*d[i], *s[i]);
}

// Forward + loss + backward for one example; accumulates into chunk grads.
double train_example_mlm(const Encoder<float>& enc, const GenHead<float>& gen,
                         const ModelConfig& cfg, const BatchItem& item, float scale,
                         Encoder<float>& genc, GenHead<float>& ggen, Acts<float>& acts) {
    const auto valid = all_valid(item.input.size());
    encoder_forward(enc, cfg, item.input, valid, true, item.dropout_seed, acts);
    Matrix<float> dhidden(acts.n, cfg.embed_dim);
    double loss = 0.0;
    for (auto [pos, target] : item.mlm_targets)
        loss += gen_loss_backward(gen, acts.hidden(), pos, target, scale, ggen, dhidden);
    encoder_backward(enc, cfg, acts, dhidden, genc);
    return loss;
}

double train_example_cls(const Encoder<float>& enc, const ClsHead<float>& cls,
                         const ModelConfig& cfg, const BatchItem& item, float scale,
                         Encoder<float>& genc, ClsHead<float>& gcls, Acts<float>& acts) {
    const auto valid = all_valid(item.input.size());
    encoder_forward(enc, cfg, item.input, valid, true, item.dropout_seed, acts);
    Matrix<float> dhidden(acts.n, cfg.embed_dim);
    const double loss = cls_loss_backward(cls, acts.hidden(), item.label, scale, gcls, dhidden);
    encoder_backward(enc, cfg, acts, dhidden, genc);
    return loss;
}

// Evaluation-mode masked-LM loss on fixed instances; mean over positions.
double eval_mlm_loss(const Encoder<float>& enc, const GenHead<float>& gen, const ModelConfig& cfg,
                     const std::vector<BatchItem>& items) {
    std::vector<double> losses(items.size(), 0.0);
    std::vector<int> counts(items.size(), 0);
    parallel_for(static_cast<int>(items.size()), [&](int i) {
        const auto& item = items[static_cast<std::size_t>(i)];
        Acts<float> acts;
        const auto valid = all_valid(item.input.size());
        encoder_forward(enc, cfg, item.input, valid, false, 0, acts);
        double loss = 0.0;
        for (auto [pos, target] : item.mlm_targets) {
            const Matrix<float>& h = acts.hidden();
            const int v = cfg.vocab_size;
            std::vector<float> logits(static_cast<std::size_t>(v));
            for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] = gen.b.a[static_cast<std::size_t>(j)];
            const float* hr = h.row(pos);
            for (int e = 0; e < cfg.embed_dim; ++e) {
                const float he = hr[e];
                const float* wrow = gen.w.row(e);
                for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] += he * wrow[j];
            }
            float mx = logits[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
            double denom = 0.0;
            for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(logits[static_cast<std::size_t>(j)] - mx));
            loss += -(static_cast<double>(logits[static_cast<std::size_t>(target)] - mx) - std::log(denom));
        }
        losses[static_cast<std::size_t>(i)] = loss;
        counts[static_cast<std::size_t>(i)] = static_cast<int>(item.mlm_targets.size());
    });
    double total = 0.0;
    long positions = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        total += losses[i];
        positions += counts[i];
    }
    return positions > 0 ? total / static_cast<double>(positions) : 0.0;
}

struct ClsEval {
    double loss = 0.0;
    double accuracy = 0.0;
};

ClsEval eval_cls(const Encoder<float>& enc, const ClsHead<float>& cls, const ModelConfig& cfg,
                 const std::vector<LabeledExample>& data) {
    if (data.empty()) return {};
    std::vector<double> losses(data.size());
    std::vector<char> hits(data.size());
    parallel_for(static_cast<int>(data.size()), [&](int i) {
        const auto& ex = data[static_cast<std::size_t>(i)];
        const auto input = build_model_input(ex.tokens, cfg);
        Acts<float> acts;
        const auto valid = all_valid(input.size());
        encoder_forward(enc, cfg, input, valid, false, 0, acts);
        const auto probs = cls_probs(cls, acts.hidden());
        losses[static_cast<std::size_t>(i)] = cross_entropy(probs, ex.label);
        int best = 0;
        for (int k = 1; k < cfg.num_classes; ++k)
            if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) best = k;
        hits[static_cast<std::size_t>(i)] = best == ex.label ? 1 : 0;
    });
    ClsEval out;
    long hit_count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        out.loss += losses[i];
        hit_count += hits[i];
    }
    out.loss /= static_cast<double>(data.size());
    out.accuracy = static_cast<double>(hit_count) / static_cast<double>(data.size());
    return out;
}

void append_raw(std::string& buf, const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <typename V>
void append_pod(std::string& buf, V v) {
    append_raw(buf, &v, sizeof(v));
}

template <typename V>
V read_pod(const std::string& buf, std::size_t& off) {
    if (off + sizeof(V) > buf.size()) throw std::runtime_error("truncated checkpoint");
    V v;
    std::memcpy(&v, buf.data() + off, sizeof(V));
    off += sizeof(V);
    return v;
}

}  // namespace

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::pretrained: return "pretrained";
        case Provenance::finetuned: return "finetuned";
        case Provenance::frankenstein: return "frankenstein";
    }
    return "?";
}

ModelBundle init_bundle(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelBundle b;
    b.config = cfg;
    b.encoder = make_encoder<float>(cfg);
    b.gen_head = make_gen_head<float>(cfg);
    b.cls_head = make_cls_head<float>(cfg);
    Rng rng(seed);
    init_encoder(b.encoder, rng);
    init_gen_head(*b.gen_head, rng);
    init_cls_head(*b.cls_head, rng);
    b.provenance = Provenance::pretrained;
    return b;
}

std::vector<double> forward_mlm(const ModelBundle& bundle, std::span<const int> tokens,
                                int position) {
    if (!bundle.gen_head) throw std::runtime_error("bundle has no generation head");
    check_tokens(bundle.config, tokens);
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        throw std::invalid_argument("position out of range");
    if (tokens[static_cast<std::size_t>(position)] != bundle.config.specials.mask)
        throw std::invalid_argument("no MASK at position");

    Acts<float> acts;
    const auto valid = all_valid(tokens.size());
    encoder_forward(bundle.encoder, bundle.config, tokens, valid, false, 0, acts);
    const Matrix<float>& h = acts.hidden();
    const GenHead<float>& gen = *bundle.gen_head;
    const int v = bundle.config.vocab_size;
    std::vector<double> logits(static_cast<std::size_t>(v));
    for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] = gen.b.a[static_cast<std::size_t>(j)];
    const float* hr = h.row(position);
    for (int e = 0; e < bundle.config.embed_dim; ++e) {
        const double he = hr[e];
        const float* wrow = gen.w.row(e);
        for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] += he * wrow[j];
    }
    double mx = logits[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) {
        logits[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - mx);
        denom += logits[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] /= denom;
    return logits;
}

std::vector<double> forward_cls(const ModelBundle& bundle, std::span<const int> tokens) {
    if (!bundle.cls_head) throw std::runtime_error("bundle has no classification head");
    check_tokens(bundle.config, tokens);
    Acts<float> acts;
    const auto valid = all_valid(tokens.size());
    encoder_forward(bundle.encoder, bundle.config, tokens, valid, false, 0, acts);
    return cls_probs(*bundle.cls_head, acts.hidden());
}

double cross_entropy(std::span<const double> probs, int label) {
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw std::invalid_argument("label out of range");
    constexpr double kEps = 1e-12;
    const double p = std::max(probs[static_cast<std::size_t>(label)], kEps);
    return -std::log(p);
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open curve file for writing: " + path);
    f << "step,split,loss\n";
    char buf[64];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof(buf), "%.9g", p.loss);
        f << p.step << ',' << p.split << ',' << buf << '\n';
    }
}

PretrainResult pretrain_mlm(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                            const PretrainParams& params) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    if (!(params.mask_fraction > 0.0f && params.mask_fraction <= 0.5f))
        throw std::invalid_argument("mask_fraction must be in (0, 0.5]");
    if (params.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");

    PretrainResult out;
    out.bundle = init_bundle(cfg, params.seed);
    out.bundle.cls_head.reset();
    out.bundle.provenance = Provenance::pretrained;

    // Deterministic held-out split: at least one document.
    std::vector<int> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng split_rng(mix_seed(params.seed, "pretrain_split"));
    split_rng.shuffle(order);
    const std::size_t heldout_n = std::max<std::size_t>(1, corpus.size() / 10);
    std::vector<int> heldout(order.begin(), order.begin() + static_cast<long>(heldout_n));
    std::vector<int> train(order.begin() + static_cast<long>(heldout_n), order.end());
    if (train.empty()) train = heldout;

    const auto make_item = [&](const std::vector<int>& doc, Rng& rng) {
        BatchItem item;
        item.input = build_model_input(doc, cfg);
        const int n = static_cast<int>(item.input.size());
        for (int i = 1; i < n; ++i)
            if (rng.bernoulli(params.mask_fraction)) item.mlm_targets.emplace_back(i, item.input[static_cast<std::size_t>(i)]);
        if (item.mlm_targets.empty() && n > 1) {
            const int pos = 1 + rng.below_int(n - 1);
            item.mlm_targets.emplace_back(pos, item.input[static_cast<std::size_t>(pos)]);
        }
        for (const auto& t : item.mlm_targets)
            item.input[static_cast<std::size_t>(t.first)] = cfg.specials.mask;
        return item;
    };

    // Fixed evaluation instances for the held-out split.
    Rng eval_rng(mix_seed(params.seed, "pretrain_eval"));
    std::vector<BatchItem> eval_items;
    for (int idx : heldout) {
        auto item = make_item(corpus[static_cast<std::size_t>(idx)], eval_rng);
        if (!item.mlm_targets.empty()) eval_items.push_back(std::move(item));
    }

    Encoder<float>& enc = out.bundle.encoder;
    GenHead<float>& gen = *out.bundle.gen_head;

    AdamW<float> opt;
    EncGrads grads(cfg);
    {
        std::vector<Matrix<float>*> ps, gs;
        std::vector<char> decays;
        visit_encoder(enc, [&](const std::string&, Matrix<float>& m, bool d) { ps.push_back(&m); decays.push_back(d); });
        visit_encoder(grads.enc, [&](const std::string&, Matrix<float>& m, bool) { gs.push_back(&m); });
        visit_gen_head(gen, [&](const std::string&, Matrix<float>& m, bool d) { ps.push_back(&m); decays.push_back(d); });
        visit_gen_head(grads.gen, [&](const std::string&, Matrix<float>& m, bool) { gs.push_back(&m); });
        for (std::size_t i = 0; i < ps.size(); ++i) opt.add(*ps[i], *gs[i], decays[i] != 0);
    }

    std::vector<EncGrads> chunk_grads;
    chunk_grads.reserve(kGradChunks);
    for (int c = 0; c < kGradChunks; ++c) chunk_grads.emplace_back(cfg);

    Rng rng(mix_seed(params.seed, "pretrain_batches"));
    for (int step = 0; step < params.steps; ++step) {
        std::vector<BatchItem> batch;
        batch.reserve(static_cast<std::size_t>(params.batch_size));
        long total_masked = 0;
        for (int b = 0; b < params.batch_size; ++b) {
            const int idx = train[static_cast<std::size_t>(rng.below(train.size()))];
            auto item = make_item(corpus[static_cast<std::size_t>(idx)], rng);
            item.dropout_seed = rng.next_u64();
            total_masked += static_cast<long>(item.mlm_targets.size());
            batch.push_back(std::move(item));
        }
        if (total_masked == 0) continue;
        const float scale = 1.0f / static_cast<float>(total_masked);

        grads.zero();
        for (auto& c : chunk_grads) c.zero();
        parallel_for(kGradChunks, [&](int c) {
            Acts<float> acts;
            const std::size_t begin = batch.size() * static_cast<std::size_t>(c) / kGradChunks;
            const std::size_t end = batch.size() * static_cast<std::size_t>(c + 1) / kGradChunks;
            auto& cg = chunk_grads[static_cast<std::size_t>(c)];
            for (std::size_t i = begin; i < end; ++i)
                cg.loss_sum += train_example_mlm(enc, gen, cfg, batch[i], scale, cg.enc, cg.gen, acts);
        });
        double loss_sum = 0.0;
        for (auto& cgr : chunk_grads) {
            merge_encoder_grads(grads.enc, cgr.enc);
            accumulate(grads.gen.w, cgr.gen.w);
            accumulate(grads.gen.b, cgr.gen.b);
            loss_sum += cgr.loss_sum;
        }
        const double step_loss = loss_sum / static_cast<double>(total_masked);
        if (!std::isfinite(step_loss))
            throw std::runtime_error("pretraining diverged at step " + std::to_string(step) +
                                     ": loss is not finite");
        out.curve.push_back({step, "train", step_loss});
        opt.step(params.learning_rate, params.weight_decay);

        if (params.eval_every > 0 && (step + 1) % params.eval_every == 0) {
            const double hl = eval_mlm_loss(enc, gen, cfg, eval_items);
            if (!std::isfinite(hl))
                throw std::runtime_error("pretraining diverged at step " + std::to_string(step) +
                                         ": held-out loss is not finite");
            out.curve.push_back({step, "heldout", hl});
        }
    }

    out.heldout_loss = eval_mlm_loss(enc, gen, cfg, eval_items);
    out.curve.push_back({params.steps, "heldout", out.heldout_loss});
    return out;
}

FinetuneResult fine_tune_classifier(const ModelBundle& pretrained,
                                    const std::vector<LabeledExample>& train,
                                    const std::vector<LabeledExample>& val,
                                    const FinetuneParams& params) {
    const ModelConfig& cfg = pretrained.config;
    if (train.empty()) throw std::invalid_argument("empty dataset");
    {
        std::set<int> labels;
        for (const auto& ex : train) {
            if (ex.label < 0 || ex.label >= cfg.num_classes)
                throw std::invalid_argument("label out of range");
            labels.insert(ex.label);
        }
        if (labels.size() < 2) throw std::invalid_argument("degenerate label set");
        for (const auto& ex : val)
            if (ex.label < 0 || ex.label >= cfg.num_classes)
                throw std::invalid_argument("label out of range");
    }
    if (params.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");

    FinetuneResult out;
    out.bundle.config = cfg;
    out.bundle.encoder = pretrained.encoder;
    out.bundle.cls_head = make_cls_head<float>(cfg);
    out.bundle.gen_head.reset();
    out.bundle.provenance = Provenance::finetuned;
    {
        Rng init_rng(mix_seed(params.seed, "cls_init"));
        init_cls_head(*out.bundle.cls_head, init_rng);
    }

    Encoder<float>& enc = out.bundle.encoder;
    ClsHead<float>& cls = *out.bundle.cls_head;

    AdamW<float> opt;
    EncGrads grads(cfg);
    {
        std::vector<Matrix<float>*> ps, gs;
        std::vector<char> decays;
        visit_encoder(enc, [&](const std::string&, Matrix<float>& m, bool d) { ps.push_back(&m); decays.push_back(d); });
        visit_encoder(grads.enc, [&](const std::string&, Matrix<float>& m, bool) { gs.push_back(&m); });
        visit_cls_head(cls, [&](const std::string&, Matrix<float>& m, bool d) { ps.push_back(&m); decays.push_back(d); });
        visit_cls_head(grads.cls, [&](const std::string&, Matrix<float>& m, bool) { gs.push_back(&m); });
        for (std::size_t i = 0; i < ps.size(); ++i) opt.add(*ps[i], *gs[i], decays[i] != 0);
    }

    std::vector<EncGrads> chunk_grads;
    for (int c = 0; c < kGradChunks; ++c) chunk_grads.emplace_back(cfg);

    Encoder<float> best_enc = enc;
    ClsHead<float> best_cls = cls;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    bool have_best = false;

    Rng rng(mix_seed(params.seed, "finetune_epochs"));
    std::vector<int> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    int epochs_run = 0;
    for (int epoch = 0; epoch < params.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        long epoch_examples = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(params.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(params.batch_size));
            std::vector<BatchItem> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                const auto& ex = train[static_cast<std::size_t>(order[i])];
                BatchItem item;
                item.input = build_model_input(ex.tokens, cfg);
                item.label = ex.label;
                item.dropout_seed = rng.next_u64();
                batch.push_back(std::move(item));
            }
            const float scale = 1.0f / static_cast<float>(batch.size());

            grads.zero();
            for (auto& c : chunk_grads) c.zero();
            parallel_for(kGradChunks, [&](int c) {
                Acts<float> acts;
                const std::size_t begin = batch.size() * static_cast<std::size_t>(c) / kGradChunks;
                const std::size_t end = batch.size() * static_cast<std::size_t>(c + 1) / kGradChunks;
                auto& cg = chunk_grads[static_cast<std::size_t>(c)];
                for (std::size_t i = begin; i < end; ++i)
                    cg.loss_sum += train_example_cls(enc, cls, cfg, batch[i], scale, cg.enc, cg.cls, acts);
            });
            double loss_sum = 0.0;
            for (auto& cgr : chunk_grads) {
                merge_encoder_grads(grads.enc, cgr.enc);
                accumulate(grads.cls.pool_w, cgr.cls.pool_w);
                accumulate(grads.cls.pool_b, cgr.cls.pool_b);
                accumulate(grads.cls.out_w, cgr.cls.out_w);
                accumulate(grads.cls.out_b, cgr.cls.out_b);
                loss_sum += cgr.loss_sum;
            }
            if (!std::isfinite(loss_sum))
                throw std::runtime_error("fine-tuning diverged in epoch " + std::to_string(epoch) +
                                         ": loss is not finite");
            epoch_loss += loss_sum;
            epoch_examples += static_cast<long>(batch.size());
            opt.step(params.learning_rate, params.weight_decay);
        }
        epochs_run = epoch + 1;
        out.curve.push_back({epoch, "train", epoch_loss / static_cast<double>(epoch_examples)});

        if (!val.empty()) {
            const ClsEval ve = eval_cls(enc, cls, cfg, val);
            out.curve.push_back({epoch, "val", ve.loss});
            if (ve.loss < best_val) {
                best_val = ve.loss;
                best_enc = enc;
                best_cls = cls;
                have_best = true;
                since_best = 0;
            } else if (++since_best >= params.early_stop_patience) {
                break;
            }
        }
    }

    if (have_best) {
        enc = best_enc;
        cls = best_cls;
        out.best_val_loss = best_val;
    }
    out.stopped_after_epoch = epochs_run;
    out.train_accuracy = eval_cls(enc, cls, cfg, train).accuracy;
    if (!val.empty()) {
        const ClsEval ve = eval_cls(enc, cls, cfg, val);
        out.val_accuracy = ve.accuracy;
        if (!have_best) out.best_val_loss = ve.loss;
    }
    return out;
}

ModelBundle assemble_frankenstein(const ModelBundle& finetuned, const ModelBundle& pretrained) {
    if (!(finetuned.config == pretrained.config))
        throw std::invalid_argument("config mismatch between fine-tuned and pretrained bundles");
    if (!pretrained.gen_head) throw std::runtime_error("bundle has no generation head");
    if (finetuned.provenance != Provenance::finetuned)
        throw std::invalid_argument("first bundle must be finetuned");
    if (pretrained.provenance != Provenance::pretrained)
        throw std::invalid_argument("second bundle must be pretrained");
    ModelBundle out;
    out.config = finetuned.config;
    out.encoder = finetuned.encoder;
    out.gen_head = pretrained.gen_head;
    out.cls_head.reset();
    out.provenance = Provenance::frankenstein;
    return out;
}

namespace {

template <typename Collect>
std::vector<std::pair<std::string, Matrix<double>*>> collect_tensors(Collect&& collect) {
    std::vector<std::pair<std::string, Matrix<double>*>> out;
    collect([&](const std::string& name, Matrix<double>& m, bool) { out.emplace_back(name, &m); });
    return out;
}

double eval_loss_double(const Encoder<double>& enc, const GenHead<double>* gen,
                        const ClsHead<double>* cls, const ModelConfig& cfg,
                        const GradCheckInput& input) {
    Acts<double> acts;
    const auto valid = all_valid(input.tokens.size());
    encoder_forward(enc, cfg, input.tokens, valid, false, 0, acts);
    if (input.loss == GradCheckInput::Loss::mlm) {
        const Matrix<double>& h = acts.hidden();
        const int v = cfg.vocab_size;
        std::vector<double> logits(static_cast<std::size_t>(v));
        for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] = gen->b.a[static_cast<std::size_t>(j)];
        const double* hr = h.row(input.position);
        for (int e = 0; e < cfg.embed_dim; ++e) {
            const double he = hr[e];
            const double* wrow = gen->w.row(e);
            for (int j = 0; j < v; ++j) logits[static_cast<std::size_t>(j)] += he * wrow[j];
        }
        double mx = logits[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(logits[static_cast<std::size_t>(j)] - mx);
        return -(logits[static_cast<std::size_t>(input.target)] - mx - std::log(denom));
    }
    const auto probs = cls_probs(*cls, acts.hidden());
    return cross_entropy(probs, input.target);
}

}  // namespace

GradCheckReport gradient_check(const ModelBundle& bundle, const GradCheckInput& input, int samples,
                               double tolerance, std::uint64_t seed) {
    const ModelConfig& cfg = bundle.config;
    check_tokens(cfg, input.tokens);
    if (input.loss == GradCheckInput::Loss::mlm) {
        if (!bundle.gen_head) throw std::runtime_error("bundle has no generation head");
        if (input.tokens[static_cast<std::size_t>(input.position)] != cfg.specials.mask)
            throw std::invalid_argument("no MASK at position");
        if (input.target < 0 || input.target >= cfg.vocab_size)
            throw std::invalid_argument("target token out of range");
    } else {
        if (!bundle.cls_head) throw std::runtime_error("bundle has no classification head");
        if (input.target < 0 || input.target >= cfg.num_classes)
            throw std::invalid_argument("label out of range");
    }

    Encoder<double> enc = convert_encoder<double>(bundle.encoder);
    GenHead<double> gen;
    ClsHead<double> cls;
    const bool use_gen = input.loss == GradCheckInput::Loss::mlm;
    if (use_gen) gen = convert_gen_head<double>(*bundle.gen_head);
    else cls = convert_cls_head<double>(*bundle.cls_head);

    // Analytic gradients.
    Encoder<double> genc = make_encoder<double>(cfg);
    GenHead<double> ggen = make_gen_head<double>(cfg);
    ClsHead<double> gcls = make_cls_head<double>(cfg);
    {
        Acts<double> acts;
        const auto valid = all_valid(input.tokens.size());
        encoder_forward(enc, cfg, input.tokens, valid, false, 0, acts);
        Matrix<double> dhidden(acts.n, cfg.embed_dim);
        if (use_gen)
            gen_loss_backward(gen, acts.hidden(), input.position, input.target, 1.0, ggen, dhidden);
        else
            cls_loss_backward(cls, acts.hidden(), input.target, 1.0, gcls, dhidden);
        encoder_backward(enc, cfg, acts, dhidden, genc);
    }

    auto params = collect_tensors([&](auto&& fn) {
        visit_encoder(enc, fn);
        if (use_gen) visit_gen_head(gen, fn);
        else visit_cls_head(cls, fn);
    });
    auto grads = collect_tensors([&](auto&& fn) {
        visit_encoder(genc, fn);
        if (use_gen) visit_gen_head(ggen, fn);
        else visit_cls_head(gcls, fn);
    });

    std::size_t total = 0;
    for (auto& [name, m] : params) total += m->size();

    Rng rng(seed);
    std::set<std::size_t> coords;
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(samples), total);
    while (coords.size() < want) coords.insert(static_cast<std::size_t>(rng.below(total)));

    GradCheckReport report;
    report.sampled = static_cast<int>(coords.size());
    for (std::size_t coord : coords) {
        std::size_t off = coord;
        std::size_t tensor = 0;
        while (off >= params[tensor].second->size()) {
            off -= params[tensor].second->size();
            ++tensor;
        }
        double& theta = params[tensor].second->a[off];
        const double analytic = grads[tensor].second->a[off];
        const double h = 1e-5 * std::max(1.0, std::abs(theta));
        const double saved = theta;
        theta = saved + h;
        const double lp = eval_loss_double(enc, use_gen ? &gen : nullptr, use_gen ? nullptr : &cls, cfg, input);
        theta = saved - h;
        const double lm = eval_loss_double(enc, use_gen ? &gen : nullptr, use_gen ? nullptr : &cls, cfg, input);
        theta = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        // gradients below the 1e-5 floor are compared absolutely at that scale
        const double rel = std::abs(analytic - numeric) /
                           std::max({std::abs(analytic), std::abs(numeric), 1e-5});
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_tensor = params[tensor].first;
        }
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'M', 'X', 'M', 'B', '0', '0', '0', '1'};
}

void save_bundle(const std::string& path, const ModelBundle& bundle) {
    std::string buf;
    buf.reserve(1 << 20);
    append_raw(buf, kMagic, sizeof(kMagic));
    const ModelConfig& c = bundle.config;
    for (int v : {c.vocab_size, c.max_seq_len, c.embed_dim, c.num_layers, c.num_heads,
                  c.hidden_dim, c.num_classes, c.specials.pad, c.specials.unk, c.specials.cls,
                  c.specials.mask})
        append_pod<std::int32_t>(buf, v);
    append_pod<float>(buf, c.dropout_rate);
    append_pod<std::uint8_t>(buf, static_cast<std::uint8_t>(bundle.provenance));
    append_pod<std::uint8_t>(buf, bundle.gen_head ? 1 : 0);
    append_pod<std::uint8_t>(buf, bundle.cls_head ? 1 : 0);

    const auto dump = [&](const Matrix<float>& m) {
        append_raw(buf, m.a.data(), m.a.size() * sizeof(float));
    };
    visit_encoder(bundle.encoder, [&](const std::string&, const Matrix<float>& m, bool) { dump(m); });
    if (bundle.gen_head)
        visit_gen_head(*bundle.gen_head, [&](const std::string&, const Matrix<float>& m, bool) { dump(m); });
    if (bundle.cls_head)
        visit_cls_head(*bundle.cls_head, [&](const std::string&, const Matrix<float>& m, bool) { dump(m); });

    append_pod<std::uint64_t>(buf, fnv1a(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint: " + path);
}

ModelBundle load_bundle(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < sizeof(kMagic) + sizeof(std::uint64_t))
        throw std::runtime_error("truncated checkpoint: " + path);
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path);
    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof(stored));
    if (stored != fnv1a(buf.data(), body))
        throw std::runtime_error("checkpoint checksum mismatch: " + path);

    std::size_t off = sizeof(kMagic);
    ModelBundle out;
    ModelConfig& c = out.config;
    c.vocab_size = read_pod<std::int32_t>(buf, off);
    c.max_seq_len = read_pod<std::int32_t>(buf, off);
    c.embed_dim = read_pod<std::int32_t>(buf, off);
    c.num_layers = read_pod<std::int32_t>(buf, off);
    c.num_heads = read_pod<std::int32_t>(buf, off);
    c.hidden_dim = read_pod<std::int32_t>(buf, off);
    c.num_classes = read_pod<std::int32_t>(buf, off);
    c.specials.pad = read_pod<std::int32_t>(buf, off);
    c.specials.unk = read_pod<std::int32_t>(buf, off);
    c.specials.cls = read_pod<std::int32_t>(buf, off);
    c.specials.mask = read_pod<std::int32_t>(buf, off);
    c.dropout_rate = read_pod<float>(buf, off);
    c.validate();
    const auto provenance = read_pod<std::uint8_t>(buf, off);
    if (provenance > 2) throw std::runtime_error("bad provenance tag in checkpoint");
    out.provenance = static_cast<Provenance>(provenance);
    const bool has_gen = read_pod<std::uint8_t>(buf, off) != 0;
    const bool has_cls = read_pod<std::uint8_t>(buf, off) != 0;

    out.encoder = make_encoder<float>(c);
    if (has_gen) out.gen_head = make_gen_head<float>(c);
    if (has_cls) out.cls_head = make_cls_head<float>(c);

    const auto slurp = [&](Matrix<float>& m) {
        const std::size_t bytes = m.a.size() * sizeof(float);
        if (off + bytes > body) throw std::runtime_error("truncated checkpoint: " + path);
        std::memcpy(m.a.data(), buf.data() + off, bytes);
        off += bytes;
        for (float x : m.a)
            if (!std::isfinite(x)) throw std::runtime_error("non-finite weight in checkpoint");
    };
    visit_encoder(out.encoder, [&](const std::string&, Matrix<float>& m, bool) { slurp(m); });
    if (out.gen_head)
        visit_gen_head(*out.gen_head, [&](const std::string&, Matrix<float>& m, bool) { slurp(m); });
    if (out.cls_head)
        visit_cls_head(*out.cls_head, [&](const std::string&, Matrix<float>& m, bool) { slurp(m); });
    if (off != body) throw std::runtime_error("trailing bytes in checkpoint: " + path);
    return out;
}

namespace {
bool matrices_identical(const Matrix<float>& a, const Matrix<float>& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.a.data(), b.a.data(), a.a.size() * sizeof(float)) == 0;
}
}  // namespace

bool encoders_identical(const Encoder<float>& a, const Encoder<float>& b) {
    if (a.layers.size() != b.layers.size()) return false;
    bool same = true;
    std::vector<const Matrix<float>*> ta, tb;
    visit_encoder(a, [&](const std::string&, const Matrix<float>& m, bool) { ta.push_back(&m); });
    visit_encoder(b, [&](const std::string&, const Matrix<float>& m, bool) { tb.push_back(&m); });
    for (std::size_t i = 0; i < ta.size(); ++i) same = same && matrices_identical(*ta[i], *tb[i]);
    return same;
}

bool gen_heads_identical(const GenHead<float>& a, const GenHead<float>& b) {
    return matrices_identical(a.w, b.w) && matrices_identical(a.b, b.b);
}

bool bundles_identical(const ModelBundle& a, const ModelBundle& b) {
    if (!(a.config == b.config) || a.provenance != b.provenance) return false;
    if (a.gen_head.has_value() != b.gen_head.has_value()) return false;
    if (a.cls_head.has_value() != b.cls_head.has_value()) return false;
    if (!encoders_identical(a.encoder, b.encoder)) return false;
    if (a.gen_head && !gen_heads_identical(*a.gen_head, *b.gen_head)) return false;
    if (a.cls_head) {
        if (!matrices_identical(a.cls_head->pool_w, b.cls_head->pool_w)) return false;
        if (!matrices_identical(a.cls_head->pool_b, b.cls_head->pool_b)) return false;
        if (!matrices_identical(a.cls_head->out_w, b.cls_head->out_w)) return false;
        if (!matrices_identical(a.cls_head->out_b, b.cls_head->out_b)) return false;
    }
    return true;
}

std::vector<int> build_model_input(std::span<const int> tokens, const ModelConfig& cfg) {
    std::vector<int> input;
    input.reserve(tokens.size() + 1);
    input.push_back(cfg.specials.cls);
    for (int t : tokens) {
        if (static_cast<int>(input.size()) >= cfg.max_seq_len) break;
        input.push_back(t);
    }
    return input;
}

}  // namespace mixmatch
