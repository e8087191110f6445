#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pbsn/dataset.hpp"
#include "pbsn/tensor.hpp"

namespace pbsn {

struct ConvBlock {
    std::size_t out_channels = 16;
    std::size_t kernel = 3;
    std::size_t stride = 2;
};

struct EncoderConfig {
    std::size_t in_channels = 3;
    std::vector<ConvBlock> blocks{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
    std::size_t feature_channels = 64;
    std::size_t input_height = 32;
    std::size_t input_width = 32;
    bool bias = true;

    /// Throws ConfigError unless the last block yields feature_channels >= 2
    /// and a feature grid of at least 2x2.
    void validate() const;
    /// (H, W) of the feature map.
    std::pair<std::size_t, std::size_t> feature_size() const;
};

/// Convolutional feature extractor: conv -> ReLU per block, padding k/2.
/// Outputs are nonnegative because every block ends in a ReLU.
class Encoder {
public:
    Encoder() = default;
    /// He-uniform kernels (bound sqrt(6/fan_in)), zero biases.
    static Encoder initialize(const EncoderConfig& config, std::uint64_t seed);

    /// [C0,H0,W0] -> [C,H,W] or [N,C0,H0,W0] -> [N,C,H,W].
    Tensor encode(const Tensor& images) const;
    /// Input followed by the post-ReLU activation of every block, no grad.
    std::vector<Tensor> trace(const Tensor& image) const;

    const EncoderConfig& config() const { return config_; }
    const std::vector<Tensor>& kernels() const { return kernels_; }
    const std::vector<Tensor>& biases() const { return biases_; }
    std::vector<Tensor> parameters() const;
    /// Deep copy with fresh leaf tensors.
    Encoder clone() const;

    std::size_t padding(std::size_t block) const { return config_.blocks.at(block).kernel / 2; }

private:
    EncoderConfig config_;
    std::vector<Tensor> kernels_;
    std::vector<Tensor> biases_;

    friend Encoder make_encoder(const EncoderConfig&, std::vector<Tensor>, std::vector<Tensor>);
};

/// Assembles an encoder from existing tensors (checkpoint loading, tests).
Encoder make_encoder(const EncoderConfig& config, std::vector<Tensor> kernels,
                     std::vector<Tensor> biases);

struct TeacherTrainConfig {
    std::size_t epochs = 15;
    double lr = 0.05;
    std::size_t batch_size = 32;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t lr_step_epochs = 10;
    double gamma = 0.1;
    std::uint64_t seed = 0;
};

struct TeacherModel {
    Encoder encoder;
    Tensor weight;  // [classes, C]
    Tensor bias;    // [classes]
    std::size_t classes = 0;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    std::vector<double> epoch_losses;

    /// Logits y_T for a batch [N,C0,H0,W0] (-> [N,classes]) or one image.
    Tensor logits(const Tensor& images) const;
    std::vector<Tensor> parameters() const;
};

/// Randomly initialised teacher (what train_teacher starts from).
TeacherModel initialize_teacher(const EncoderConfig& config, std::size_t classes,
                                std::uint64_t seed);

/// Supervised cross-entropy training; deterministic given the seed.
/// Throws TrainingError naming the step when the loss turns non-finite.
TeacherModel train_teacher(const Dataset& train, const Dataset* validation,
                           const EncoderConfig& encoder_config, const TeacherTrainConfig& config);

/// softmax(y_T), one row per image.
Tensor teacher_soft_labels(const TeacherModel& teacher, const Tensor& images);

/// Fraction of correctly classified samples, evaluated in batches without grad.
double teacher_accuracy(const TeacherModel& teacher, const Dataset& data);

}  // namespace pbsn
