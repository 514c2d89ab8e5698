#pragma once

#include <map>
#include <string>
#include <vector>

#include "capseg/capsule.hpp"
#include "capseg/labels.hpp"
#include "capseg/optim.hpp"
#include "capseg/tensor.hpp"

namespace capseg {

enum class LayerKind : std::uint8_t {
    conv,            // conv_nd + channel bias, optional relu/sigmoid
    conv_transpose,  // transposed_conv_nd + bias, optional center crop
    batch_norm,
    relu,
    sigmoid,
    primary_caps,    // [1, C, sp...] -> capsule grid
    caps_conv,
    caps_deconv,     // includes symmetric center crop when crop > 0
    caps_concat,     // concat two grids along the type axis
    caps_to_features,// grid -> [1, C*A, sp...]
    caps_mask,       // zero all capsules except the labeled class per position
    concat_channels, // concat two [1, C, sp...] values along channels
};

struct LayerDesc {
    LayerKind kind = LayerKind::conv;
    std::string name;       // parameter prefix when parameterized
    int input = -1;         // producer layer index; -1 = network input
    int skip = -1;          // second producer for concat kinds
    std::int64_t in_channels = 0, out_channels = 0;
    std::int64_t in_types = 0, in_dim = 0, out_types = 0, out_dim = 0;
    std::int64_t kernel = 1, stride = 1, padding = 0, dilation = 1;
    std::int64_t crop = 0;  // symmetric spatial crop after the op
    int routing = 3;
    bool vote_bias = false;
    bool relu_after = false;
    bool sigmoid_after = false;
    Shape out_spatial;
};

// Ordered layer graph plus the head indices the harness consumes.
struct NetworkSpec {
    std::string arch;
    int spatial_rank = 2;
    int classes = 2;
    Shape input_extents;  // [C, spatial...]
    std::vector<LayerDesc> layers;
    int extractor_out = -1;  // feature-extractor output (pretext features)
    int final_caps = -1;     // capsule layer with `classes` types (margin head)
    int logits = -1;         // decoder head producing [1, classes, sp...]
    int recon = -1;          // reconstruction branch output, -1 when disabled
    bool reconstruction = true;
    bool multi_segcaps = false;  // predict by capsule length instead of head argmax
    int routing_iterations = 3;
};

struct Segcaps2dOptions {
    std::int64_t in_channels = 1;
    std::int64_t base_channels = 16;
    // Encoder capsule-type schedule before scaling; entry 0 is the primary
    // layer (capsule dim = base_channels / types).
    std::vector<std::int64_t> type_schedule = {1, 2, 4, 4, 8, 8};
    std::int64_t schedule_divisor = 4;  // desk-scale reduction
    std::int64_t capsule_dim = 8;
    std::int64_t conv_kernel = 5;    // stride-2 down transitions and merges
    std::int64_t deconv_kernel = 4;  // stride-2 up transitions
    int routing = 3;
    bool vote_bias = false;
    bool reconstruction = true;
    bool multi_segcaps = false;
};

struct Ucaps3dOptions {
    std::int64_t in_channels = 1;
    std::int64_t extractor_channels[3] = {16, 32, 64};
    std::int64_t channel_divisor = 4;
    std::vector<std::int64_t> type_schedule = {16, 16, 16, 8, 8, 8};
    std::int64_t schedule_divisor = 4;
    std::int64_t capsule_dim = 8;
    std::int64_t caps_kernel = 5;
    std::int64_t extractor_kernel = 5;
    std::int64_t decoder_channels = 16;
    int routing = 3;
    bool reconstruction = true;
};

NetworkSpec build_segcaps2d(const Shape& input_hw, int classes,
                            const Segcaps2dOptions& options = {});
NetworkSpec build_ucaps3d(const Shape& input_zyx, int classes,
                          const Ucaps3dOptions& options = {});

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

class ModelParams {
public:
    void add(const std::string& name, Tensor tensor, bool trainable);
    bool has(const std::string& name) const { return tensors_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool is_trainable(const std::string& name) const;
    const std::vector<std::string>& order() const { return order_; }
    std::vector<NamedTensor> trainables() const;
    std::vector<NamedTensor> all() const;
    std::vector<std::pair<std::string, Shape>> manifest() const;
    void zero_grads();

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> tensors_;
    std::map<std::string, bool> trainable_;
};

ModelParams init_params(const NetworkSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardResult {
    Tensor probs;         // [sp..., N], softmax of the decoder head
    Tensor logits;        // [sp..., N]
    Tensor caps_lengths;  // [enc sp..., N] from the final capsule layer
    Tensor recon;         // [C, sp...]; undefined when the branch is off

    LabelMap head_labels() const { return argmax_labels(probs); }
    LabelMap length_labels() const { return argmax_labels(caps_lengths); }
    LabelMap predicted(bool multi_segcaps) const {
        return multi_segcaps ? length_labels() : head_labels();
    }
};

// Runs the layer graph. gt_mask drives the reconstruction-branch capsule
// masking during training; when absent the predicted labels are used.
// with_graph=false runs on detached parameter views (no autodiff bookkeeping).
ForwardResult forward_segment(const NetworkSpec& spec, ModelParams& params, const Tensor& image,
                              const LabelMap* gt_mask, bool train_mode, bool with_graph);

// Feature-extractor part only (the pretext-task network F).
Tensor forward_extractor(const NetworkSpec& spec, ModelParams& params, const Tensor& image,
                         bool with_graph);

// Names of the extractor parameters (the subset SSL pretraining optimizes).
std::vector<std::string> extractor_param_names(const NetworkSpec& spec);

}  // namespace capseg
