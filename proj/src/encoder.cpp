#include "pbsn/encoder.hpp"

#include <cmath>
#include <numeric>
#include <spdlog/spdlog.h>

#include "pbsn/errors.hpp"
#include "pbsn/losses.hpp"
#include "pbsn/ops.hpp"
#include "pbsn/optim.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

void EncoderConfig::validate() const {
    if (in_channels == 0) throw ConfigError("encoder.in_channels must be positive");
    if (blocks.empty()) throw ConfigError("encoder.blocks must not be empty");
    for (const auto& b : blocks) {
        if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0) {
            throw ConfigError("encoder.blocks entries need positive channels, kernel and stride");
        }
    }
    if (blocks.back().out_channels != feature_channels) {
        throw ConfigError("encoder.feature_channels must equal the last block's out_channels");
    }
    if (feature_channels < 2) throw ConfigError("encoder.feature_channels must be >= 2");
    const auto [h, w] = feature_size();
    if (h < 2 || w < 2) {
        throw ConfigError("encoder: feature grid " + std::to_string(h) + "x" + std::to_string(w) +
                          " is smaller than 2x2");
    }
}

std::pair<std::size_t, std::size_t> EncoderConfig::feature_size() const {
    std::size_t h = input_height, w = input_width;
    for (const auto& b : blocks) {
        const std::size_t pad = b.kernel / 2;
        if (h + 2 * pad < b.kernel || w + 2 * pad < b.kernel) return {0, 0};
        h = (h + 2 * pad - b.kernel) / b.stride + 1;
        w = (w + 2 * pad - b.kernel) / b.stride + 1;
    }
    return {h, w};
}

Encoder Encoder::initialize(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = Rng::derive(seed, 0xe4c0ULL);
    std::vector<Tensor> kernels, biases;
    std::size_t in = config.in_channels;
    for (const auto& b : config.blocks) {
        const std::size_t fan_in = in * b.kernel * b.kernel;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<double> w(b.out_channels * fan_in);
        for (auto& v : w) v = rng.uniform(-bound, bound);
        kernels.push_back(Tensor::parameter({b.out_channels, in, b.kernel, b.kernel}, std::move(w)));
        if (config.bias) {
            biases.push_back(
                Tensor::parameter({b.out_channels}, std::vector<double>(b.out_channels, 0.0)));
        }
        in = b.out_channels;
    }
    return make_encoder(config, std::move(kernels), std::move(biases));
}

Encoder make_encoder(const EncoderConfig& config, std::vector<Tensor> kernels,
                     std::vector<Tensor> biases) {
    config.validate();
    if (kernels.size() != config.blocks.size() ||
        (config.bias ? biases.size() != kernels.size() : !biases.empty())) {
        throw ConfigError("encoder: parameter count does not match the block list");
    }
    std::size_t in = config.in_channels;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        const auto& b = config.blocks[i];
        if (kernels[i].shape() != Shape{b.out_channels, in, b.kernel, b.kernel}) {
            throw DimensionError("encoder: kernel " + std::to_string(i) + " has shape " +
                                 shape_string(kernels[i].shape()));
        }
        if (config.bias && biases[i].shape() != Shape{b.out_channels}) {
            throw DimensionError("encoder: bias " + std::to_string(i) + " has wrong shape");
        }
        in = b.out_channels;
    }
    Encoder e;
    e.config_ = config;
    e.kernels_ = std::move(kernels);
    e.biases_ = std::move(biases);
    return e;
}

Tensor Encoder::encode(const Tensor& images) const {
    const bool batched = images.rank() == 4;
    if (!(images.rank() == 3 || batched)) {
        throw DimensionError("encode: expected image [C,H,W] or batch [N,C,H,W], got " +
                             shape_string(images.shape()));
    }
    const std::size_t off = batched ? 1 : 0;
    if (images.dim(off) != config_.in_channels || images.dim(off + 1) != config_.input_height ||
        images.dim(off + 2) != config_.input_width) {
        throw DimensionError("encode: image shape " + shape_string(images.shape()) +
                             " does not match the encoder input " +
                             std::to_string(config_.in_channels) + "x" +
                             std::to_string(config_.input_height) + "x" +
                             std::to_string(config_.input_width));
    }
    Tensor x = images;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
        x = ops::relu(ops::conv2d(x, kernels_[i], config_.bias ? biases_[i] : Tensor{},
                                  config_.blocks[i].stride, padding(i)));
    }
    return x;
}

std::vector<Tensor> Encoder::trace(const Tensor& image) const {
    NoGradGuard guard;
    std::vector<Tensor> acts{image.detach()};
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
        acts.push_back(ops::relu(ops::conv2d(acts.back(), kernels_[i],
                                             config_.bias ? biases_[i] : Tensor{},
                                             config_.blocks[i].stride, padding(i))));
    }
    return acts;
}

std::vector<Tensor> Encoder::parameters() const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
        out.push_back(kernels_[i]);
        if (config_.bias) out.push_back(biases_[i]);
    }
    return out;
}

Encoder Encoder::clone() const {
    auto copy = [](const Tensor& t) {
        return Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    };
    std::vector<Tensor> kernels, biases;
    for (const auto& k : kernels_) kernels.push_back(copy(k));
    for (const auto& b : biases_) biases.push_back(copy(b));
    return make_encoder(config_, std::move(kernels), std::move(biases));
}

// ---------------------------------------------------------------------------

Tensor TeacherModel::logits(const Tensor& images) const {
    return ops::linear(ops::avgpool_spatial(encoder.encode(images)), weight, bias);
}

std::vector<Tensor> TeacherModel::parameters() const {
    auto out = encoder.parameters();
    out.push_back(weight);
    out.push_back(bias);
    return out;
}

TeacherModel initialize_teacher(const EncoderConfig& config, std::size_t classes,
                                std::uint64_t seed) {
    if (classes < 2) throw ConfigError("teacher: need at least 2 classes");
    TeacherModel t;
    t.encoder = Encoder::initialize(config, seed);
    t.classes = classes;
    Rng rng = Rng::derive(seed, 0x7eac4ULL);
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.feature_channels));
    std::vector<double> w(classes * config.feature_channels);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    t.weight = Tensor::parameter({classes, config.feature_channels}, std::move(w));
    t.bias = Tensor::parameter({classes}, std::vector<double>(classes, 0.0));
    return t;
}

double teacher_accuracy(const TeacherModel& teacher, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    NoGradGuard guard;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 128;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        std::vector<std::size_t> idx(std::min(kChunk, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto pred = argmax_rows(teacher.logits(data.gather(idx)));
        for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

TeacherModel train_teacher(const Dataset& train, const Dataset* validation,
                           const EncoderConfig& encoder_config, const TeacherTrainConfig& config) {
    std::size_t present = 0;
    for (auto c : train.class_counts()) present += c > 0;
    if (present < 2) throw ConfigError("train_teacher: need at least two classes in the data");
    if (config.batch_size == 0) throw ConfigError("train_teacher: batch_size must be positive");

    TeacherModel teacher = initialize_teacher(encoder_config, train.classes, config.seed);
    Sgd sgd({{teacher.parameters(), config.lr}}, config.momentum, config.weight_decay);
    Rng rng = Rng::derive(config.seed, 0x5417ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        const double lr_scale = step_decay(epoch, config.lr_step_epochs, config.gamma);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::span<const std::size_t> idx(order.data() + start, n);
            std::vector<int> labels;
            for (auto i : idx) labels.push_back(train.labels[i]);
            Tensor loss;
            try {
                loss = cross_entropy(teacher.logits(train.gather(idx)), labels);
            } catch (const NumericalError& e) {
                throw TrainingError("train_teacher: diverged at step " + std::to_string(step) +
                                    " (epoch " + std::to_string(epoch) + "): " + e.what());
            }
            loss.backward();
            sgd.step(lr_scale);
            epoch_loss += loss.item();
            ++batches;
        }
        teacher.epoch_losses.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
        spdlog::debug("teacher epoch {} loss {:.5f}", epoch, teacher.epoch_losses.back());
    }
    teacher.train_accuracy = teacher_accuracy(teacher, train);
    teacher.validation_accuracy = validation ? teacher_accuracy(teacher, *validation) : 0.0;
    return teacher;
}

Tensor teacher_soft_labels(const TeacherModel& teacher, const Tensor& images) {
    NoGradGuard guard;
    return ops::softmax(teacher.logits(images));
}

}  // namespace pbsn
