#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pbsn/tensor.hpp"

namespace pbsn {

/// Labelled image set, images [N,C0,H0,W0] with values in [0,1].
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
    std::size_t image_size() const { return channels() * height() * width(); }

    /// Copies the selected samples into a batch tensor [n,C0,H0,W0].
    Tensor gather(std::span<const std::size_t> indices) const;
    /// Single sample [C0,H0,W0].
    Tensor image(std::size_t index) const;
    Dataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> class_counts() const;
    /// Per-channel mean over all pixels of all samples.
    std::vector<double> channel_mean() const;
};

}  // namespace pbsn
