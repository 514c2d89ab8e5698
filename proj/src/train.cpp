#include "capseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "capseg/rng.hpp"

namespace capseg {

const char* kMetricsCsvHeader = "iter,split,loss_total,loss_margin,loss_ce,loss_recon,dice_mean";

std::string fmt_csv(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

NetworkSpec build_network(const TrainConfig& config) {
    config.validate();
    if (config.arch == "segcaps2d") {
        Segcaps2dOptions opt;
        opt.base_channels = config.base_channels;
        opt.schedule_divisor = config.schedule_divisor;
        opt.capsule_dim = config.capsule_dim;
        opt.routing = config.routing_iterations;
        opt.vote_bias = config.vote_bias;
        opt.multi_segcaps = config.multi_segcaps;
        return build_segcaps2d({config.input_size, config.input_size}, config.classes, opt);
    }
    if (config.arch == "ucaps3d") {
        Ucaps3dOptions opt;
        opt.channel_divisor = config.schedule_divisor;
        opt.schedule_divisor = config.schedule_divisor;
        opt.capsule_dim = config.capsule_dim;
        opt.routing = config.routing_iterations;
        return build_ucaps3d({config.input_size, config.input_size, config.input_size},
                             config.classes, opt);
    }
    throw ConfigError("unknown architecture '" + config.arch + "'");
}

namespace {

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.below(i))]);
    return idx;
}

SegDataset subset(const SegDataset& dataset, const std::vector<size_t>& indices, size_t begin,
                  size_t end) {
    SegDataset out;
    out.classes = dataset.classes;
    out.spatial_rank = dataset.spatial_rank;
    for (size_t i = begin; i < end; ++i) out.samples.push_back(dataset.samples[indices[i]]);
    return out;
}

}  // namespace

std::pair<SegDataset, SegDataset> split_train_val(const SegDataset& dataset,
                                                  double val_fraction, std::uint64_t seed) {
    check_contract(dataset.samples.size() >= 2, "split: need at least 2 samples");
    Rng rng = Rng(seed).fork(0x5eedu);
    auto idx = shuffled_indices(dataset.samples.size(), rng);
    size_t val = std::max<size_t>(
        1, static_cast<size_t>(std::floor(static_cast<double>(idx.size()) * val_fraction)));
    val = std::min(val, idx.size() - 1);
    return {subset(dataset, idx, val, idx.size()), subset(dataset, idx, 0, val)};
}

std::pair<SegDataset, SegDataset> split_fold(const SegDataset& dataset, int folds, int fold,
                                             std::uint64_t seed) {
    check_contract(folds >= 2, "split_fold: need >= 2 folds");
    check_contract(fold >= 0 && fold < folds, "split_fold: fold index out of range");
    check_contract(dataset.samples.size() >= static_cast<size_t>(folds),
                   "split_fold: fewer samples than folds");
    Rng rng = Rng(seed).fork(0xf01d5u);
    auto idx = shuffled_indices(dataset.samples.size(), rng);
    const size_t n = idx.size();
    const size_t lo = n * static_cast<size_t>(fold) / static_cast<size_t>(folds);
    const size_t hi = n * static_cast<size_t>(fold + 1) / static_cast<size_t>(folds);
    SegDataset train;
    train.classes = dataset.classes;
    train.spatial_rank = dataset.spatial_rank;
    SegDataset val = train;
    for (size_t i = 0; i < n; ++i)
        (i >= lo && i < hi ? val : train).samples.push_back(dataset.samples[idx[i]]);
    return {train, val};
}

LossBreakdown segmentation_loss(const NetworkSpec& spec, const ForwardResult& forward,
                                const SegSample& sample, const TrainConfig& config,
                                const std::vector<double>& class_weights) {
    Shape caps_spatial(forward.caps_lengths.shape().begin(),
                       forward.caps_lengths.shape().end() - 1);
    const std::int64_t factor = sample.mask.shape[0] / caps_spatial[0];
    LabelMap margin_target = nn_downsample(sample.mask, factor);
    MarginConfig margin_cfg{config.margin_m_plus, config.margin_m_minus, config.margin_lambda};
    Tensor margin =
        margin_loss(forward.caps_lengths, one_hot(margin_target, spec.classes), margin_cfg);
    Tensor ce = weighted_cross_entropy(forward.logits, sample.mask, class_weights);
    Tensor recon = spec.recon >= 0
                       ? masked_reconstruction_loss(sample.image, forward.recon,
                                                    foreground_mask(sample.mask), config.gamma)
                       : Tensor::scalar(0.0);
    return total_loss(margin, ce, recon);
}

EvalResult evaluate(const NetworkSpec& spec, ModelParams& params, const SegDataset& dataset,
                    const TrainConfig& config) {
    check_contract(!dataset.samples.empty(), "evaluate: empty dataset");
    EvalResult out;
    std::vector<SegMetrics> per_sample;
    for (const auto& sample : dataset.samples) {
        ForwardResult fwd =
            forward_segment(spec, params, sample.image, &sample.mask, false, false);
        std::vector<const LabelMap*> targets{&sample.mask};
        LossBreakdown loss = segmentation_loss(
            spec, fwd, sample, config, inverse_frequency_weights(targets, spec.classes));
        out.loss_total += loss.total_value();
        out.loss_margin += loss.margin_value();
        out.loss_ce += loss.cross_entropy_value();
        out.loss_recon += loss.reconstruction_value();
        per_sample.push_back(
            seg_metrics(fwd.predicted(spec.multi_segcaps), sample.mask, spec.classes));
    }
    const auto n = static_cast<double>(dataset.samples.size());
    out.loss_total /= n;
    out.loss_margin /= n;
    out.loss_ce /= n;
    out.loss_recon /= n;
    out.metrics = average_metrics(per_sample);
    return out;
}

namespace {

std::string metrics_row(std::int64_t iter, const char* split, double total, double margin,
                        double ce, double recon, double dice) {
    std::ostringstream os;
    os << iter << "," << split << "," << fmt_csv(total) << "," << fmt_csv(margin) << ","
       << fmt_csv(ce) << "," << fmt_csv(recon) << "," << fmt_csv(dice);
    return os.str();
}

// Seeded epoch-order batch cursor.
class BatchCursor {
public:
    BatchCursor(size_t n, Rng rng) : n_(n), rng_(rng) { reshuffle(); }

    size_t next() {
        if (pos_ == n_) reshuffle();
        return order_[pos_++];
    }

private:
    void reshuffle() {
        order_ = shuffled_indices(n_, rng_);
        pos_ = 0;
    }
    size_t n_;
    Rng rng_;
    std::vector<size_t> order_;
    size_t pos_ = 0;
};

struct RunningLoss {
    double total = 0, margin = 0, ce = 0, recon = 0, dice = 0;
    std::int64_t count = 0;
    void add(double t, double m, double c, double r, double d) {
        total += t;
        margin += m;
        ce += c;
        recon += r;
        dice += d;
        ++count;
    }
    void reset() { *this = RunningLoss{}; }
};

}  // namespace

TrainResult train_loop(const NetworkSpec& spec, ModelParams& params, AdamState& opt,
                       const SegDataset& train, const SegDataset& val,
                       const TrainConfig& config, std::int64_t start_iteration,
                       const CsvSink& csv, const CheckpointHook& checkpoint) {
    check_contract(!train.samples.empty() && !val.samples.empty(),
                   "train_loop: empty train or validation split");
    const std::int64_t stop = std::min(config.max_iterations, config.early_stop_iterations);
    TrainResult result;
    result.iterations = start_iteration;

    BatchCursor cursor(train.samples.size(), Rng(config.seed).fork(0xba7c4u));
    // replay the batch order consumed before a resume point
    for (std::int64_t it = 0; it < start_iteration; ++it)
        for (std::int64_t b = 0; b < config.batch_size; ++b) cursor.next();

    auto trainables = params.trainables();
    RunningLoss running;

    for (std::int64_t iter = start_iteration; iter < stop; ++iter) {
        std::vector<const SegSample*> batch;
        for (std::int64_t b = 0; b < config.batch_size; ++b)
            batch.push_back(&train.samples[cursor.next()]);

        std::vector<const LabelMap*> targets;
        for (const auto* s : batch) targets.push_back(&s->mask);
        const auto weights = inverse_frequency_weights(targets, spec.classes);

        Tensor batch_total;
        double t_sum = 0, m_sum = 0, c_sum = 0, r_sum = 0, d_sum = 0;
        for (const auto* s : batch) {
            ForwardResult fwd = forward_segment(spec, params, s->image, &s->mask, true, true);
            LossBreakdown loss = segmentation_loss(spec, fwd, *s, config, weights);
            if (!std::isfinite(loss.total_value())) {
                std::ostringstream os;
                os << "non-finite loss at iteration " << iter
                   << ": total=" << loss.total_value() << " margin=" << loss.margin_value()
                   << " ce=" << loss.cross_entropy_value()
                   << " recon=" << loss.reconstruction_value();
                throw ContractError(os.str());
            }
            batch_total = batch_total.defined() ? add(batch_total, loss.total) : loss.total;
            t_sum += loss.total_value();
            m_sum += loss.margin_value();
            c_sum += loss.cross_entropy_value();
            r_sum += loss.reconstruction_value();
            d_sum += seg_metrics(fwd.predicted(spec.multi_segcaps), s->mask, spec.classes)
                         .mean_dice;
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        batch_total = mul_scalar(batch_total, inv_b);
        running.add(t_sum * inv_b, m_sum * inv_b, c_sum * inv_b, r_sum * inv_b, d_sum * inv_b);

        params.zero_grads();
        backward(batch_total);
        adam_step(opt, trainables);

        const std::int64_t done = iter + 1;
        if (done % config.eval_interval == 0 || done == stop) {
            EvalResult ev = evaluate(spec, params, val, config);
            const double inv = running.count ? 1.0 / static_cast<double>(running.count) : 0.0;
            csv(metrics_row(done, "train", running.total * inv, running.margin * inv,
                            running.ce * inv, running.recon * inv, running.dice * inv));
            csv(metrics_row(done, "eval", ev.loss_total, ev.loss_margin, ev.loss_ce,
                            ev.loss_recon, ev.metrics.mean_dice));
            running.reset();
            result.final_val_dice = ev.metrics.mean_dice;

            // lr decays when validation dice has been stale for a full
            // patience window
            if (ev.metrics.mean_dice > opt.best_metric) {
                opt.best_metric = ev.metrics.mean_dice;
                opt.since_improve = 0;
            } else {
                opt.since_improve += config.eval_interval;
                if (opt.since_improve >= config.patience_iterations) {
                    opt.learning_rate *= config.lr_decay_factor;
                    opt.since_improve = 0;
                }
            }
        }
        if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 &&
            done != stop)
            checkpoint(done);
        result.iterations = done;
    }
    checkpoint(result.iterations);
    return result;
}

TrainResult pretrain_loop(const NetworkSpec& spec, ModelParams& params, AdamState& opt,
                          const SegDataset& dataset, const std::vector<Transform>& transforms,
                          const TrainConfig& config, std::int64_t start_iteration,
                          const CsvSink& csv, const CheckpointHook& checkpoint) {
    check_contract(!dataset.samples.empty(), "pretrain_loop: empty dataset");
    const std::int64_t stop = std::min(config.max_iterations, config.early_stop_iterations);
    TrainResult result;
    result.iterations = start_iteration;

    const auto& pool = transforms;
    check_contract(!pool.empty(), "pretrain_loop: empty transform set");

    // extractor parameters only
    std::vector<NamedTensor> trainables;
    for (const auto& name : extractor_param_names(spec))
        trainables.emplace_back(name, params.at(name));

    BatchCursor cursor(dataset.samples.size(), Rng(config.seed).fork(0x55e1u));
    Rng draw = Rng(config.seed).fork(0xd4a3u);
    for (std::int64_t it = 0; it < start_iteration; ++it) {
        cursor.next();
        draw.below(pool.size());
        draw.below(pool.size());
        draw.next_u64();
        draw.next_u64();
    }

    RunningLoss running;
    for (std::int64_t iter = start_iteration; iter < stop; ++iter) {
        const SegSample& sample = dataset.samples[cursor.next()];
        Transform ti = pool[static_cast<size_t>(draw.below(pool.size()))];
        Transform tj = pool[static_cast<size_t>(draw.below(pool.size()))];
        // stochastic transforms redraw per application
        ti.seed = draw.next_u64();
        tj.seed = draw.next_u64();

        Tensor vi = forward_extractor(spec, params, apply_transform(sample.image, ti), true);
        Tensor vj = forward_extractor(spec, params, apply_transform(sample.image, tj), true);
        Tensor loss = pretext_loss(vi, vj);
        if (!std::isfinite(loss.item()))
            throw ContractError("non-finite pretext loss at iteration " + std::to_string(iter));

        for (auto& [name, t] : trainables) t.zero_grad();
        backward(loss);
        adam_step(opt, trainables);
        running.add(loss.item(), 0.0, 0.0, 0.0, 0.0);

        const std::int64_t done = iter + 1;
        if (done % config.eval_interval == 0 || done == stop) {
            const double inv = running.count ? 1.0 / static_cast<double>(running.count) : 0.0;
            csv(metrics_row(done, "train", running.total * inv, 0.0, 0.0, 0.0, 0.0));
            running.reset();
        }
        if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 &&
            done != stop)
            checkpoint(done);
        result.iterations = done;
    }
    checkpoint(result.iterations);
    return result;
}

ModelParams ssl_pretrain(const NetworkSpec& spec, const SegDataset& dataset,
                         const std::vector<Transform>& transforms, const TrainConfig& config) {
    ModelParams params = init_params(spec, config.seed);
    AdamState opt;
    opt.learning_rate = config.learning_rate;
    pretrain_loop(spec, params, opt, dataset, transforms, config, 0, [](const std::string&) {},
                  [](std::int64_t) {});
    ModelParams extractor;
    for (const auto& name : extractor_param_names(spec))
        extractor.add(name, params.at(name).clone_leaf(), true);
    return extractor;
}

ModelParams finetune(const NetworkSpec& spec, ModelParams init, const SegDataset& train,
                     const SegDataset& val, const TrainConfig& config, double* final_dice) {
    AdamState opt;
    opt.learning_rate = config.learning_rate;
    TrainResult res = train_loop(spec, init, opt, train, val, config, 0,
                                 [](const std::string&) {}, [](std::int64_t) {});
    if (final_dice) *final_dice = res.final_val_dice;
    return init;
}

}  // namespace capseg
