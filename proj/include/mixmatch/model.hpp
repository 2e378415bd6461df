#ifndef MIXMATCH_MODEL_HPP
#define MIXMATCH_MODEL_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixmatch/nn.hpp"

namespace mixmatch {

enum class Provenance { pretrained, finetuned, frankenstein };

const char* to_string(Provenance p);

// Encoder plus optional heads. The target classifier, the pretrained LM and
// the head-swapped model are all values of this type, distinguished by the
// provenance tag and which heads are present. Bundles are immutable once
// training returns; evaluation-mode forwards may run concurrently.
struct ModelBundle {
    ModelConfig config;
    Encoder<float> encoder;
    std::optional<GenHead<float>> gen_head;
    std::optional<ClsHead<float>> cls_head;
    Provenance provenance = Provenance::pretrained;
};

// Fresh bundle with seeded random weights and both heads.
ModelBundle init_bundle(const ModelConfig& cfg, std::uint64_t seed);

// Masked-token distribution at `position` (which must hold [MASK]).
// Probabilities are accumulated in double so they sum to 1 within 1e-9.
std::vector<double> forward_mlm(const ModelBundle& bundle, std::span<const int> tokens,
                                int position);

// Class distribution from the position-0 pooled representation.
std::vector<double> forward_cls(const ModelBundle& bundle, std::span<const int> tokens);

// -log p[label], with p clamped at 1e-12 so the loss stays finite.
double cross_entropy(std::span<const double> probs, int label);

struct LabeledExample {
    std::vector<int> tokens;  // data-level: no [CLS], no padding
    int label = 0;
};

struct CurvePoint {
    long step;
    const char* split;  // "train" or "heldout"/"val"
    double loss;
};

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve);

struct PretrainParams {
    int steps = 0;
    int batch_size = 32;
    float learning_rate = 3e-4f;
    float weight_decay = 0.01f;
    float mask_fraction = 0.15f;
    std::uint64_t seed = 0;
    int eval_every = 50;
};

struct PretrainResult {
    ModelBundle bundle;  // encoder + generation head
    std::vector<CurvePoint> curve;
    double heldout_loss = 0.0;  // final masked-LM loss on the held-out split
};

// Masked-LM pretraining over tokenized documents. A deterministic tenth of
// the corpus (at least one document) is held out and evaluated on fixed
// masks. Throws on empty corpus, bad mask_fraction, or divergence.
PretrainResult pretrain_mlm(const std::vector<std::vector<int>>& corpus, const ModelConfig& cfg,
                            const PretrainParams& params);

struct FinetuneParams {
    int epochs = 10;
    int batch_size = 32;
    float learning_rate = 3e-4f;
    float weight_decay = 0.01f;
    int early_stop_patience = 3;
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    ModelBundle bundle;  // updated encoder + fresh classification head
    std::vector<CurvePoint> curve;
    int stopped_after_epoch = 0;  // epochs actually run
    double best_val_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

// Classification fine-tuning starting from a pretrained bundle (which is not
// modified). Early-stops on validation loss with the given patience and
// returns the best-validation weights; with an empty validation set it runs
// all epochs. The generation head is dropped from the returned bundle.
FinetuneResult fine_tune_classifier(const ModelBundle& pretrained,
                                    const std::vector<LabeledExample>& train,
                                    const std::vector<LabeledExample>& val,
                                    const FinetuneParams& params);

// Encoder from the fine-tuned bundle, generation head from the pretrained
// one, no classification head, nothing retrained.
ModelBundle assemble_frankenstein(const ModelBundle& finetuned, const ModelBundle& pretrained);

struct GradCheckInput {
    enum class Loss { mlm, cls } loss = Loss::mlm;
    std::vector<int> tokens;  // model-level (with [CLS]; [MASK] at position for mlm)
    int position = 0;         // masked position (mlm only)
    int target = 0;           // token id (mlm) or class label (cls)
};

struct GradCheckReport {
    int sampled = 0;
    double max_rel_error = 0.0;
    std::string worst_tensor;
    bool pass = false;
};

// Central finite differences at float64 against the analytic backward pass,
// on `samples` randomly chosen parameter coordinates of the active
// (encoder + head) path.
GradCheckReport gradient_check(const ModelBundle& bundle, const GradCheckInput& input,
                               int samples, double tolerance, std::uint64_t seed);

// Binary checkpoint: magic, config block, raw little-endian float32 tensors
// in visitation order, trailing FNV-1a checksum.
void save_bundle(const std::string& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::string& path);

// Exact bit equality of all tensors, used by head-exchange tests.
bool encoders_identical(const Encoder<float>& a, const Encoder<float>& b);
bool gen_heads_identical(const GenHead<float>& a, const GenHead<float>& b);
bool bundles_identical(const ModelBundle& a, const ModelBundle& b);

// [CLS]-prefixed, length-capped model input for a data-level token sequence.
std::vector<int> build_model_input(std::span<const int> tokens, const ModelConfig& cfg);

}  // namespace mixmatch

#endif  // MIXMATCH_MODEL_HPP
