#include "pbsn/dataset.hpp"

#include <algorithm>

#include "pbsn/errors.hpp"

namespace pbsn {

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
    const std::size_t stride = image_size();
    std::vector<double> out(indices.size() * stride);
    const auto src = images.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw DimensionError("dataset: sample index out of range");
        std::copy_n(src.data() + indices[i] * stride, stride, out.data() + i * stride);
    }
    return Tensor({indices.size(), channels(), height(), width()}, std::move(out));
}

Tensor Dataset::image(std::size_t index) const {
    if (index >= size()) throw DimensionError("dataset: sample index out of range");
    const std::size_t stride = image_size();
    const auto src = images.values().subspan(index * stride, stride);
    return Tensor({channels(), height(), width()}, std::vector<double>(src.begin(), src.end()));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.images = gather(indices);
    out.classes = classes;
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels[i]);
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
    return counts;
}

std::vector<double> Dataset::channel_mean() const {
    std::vector<double> mean(channels(), 0.0);
    if (size() == 0) return mean;
    const std::size_t area = height() * width();
    const auto v = images.values();
    for (std::size_t n = 0; n < size(); ++n) {
        for (std::size_t c = 0; c < channels(); ++c) {
            const double* p = v.data() + (n * channels() + c) * area;
            double acc = 0.0;
            for (std::size_t q = 0; q < area; ++q) acc += p[q];
            mean[c] += acc;
        }
    }
    for (auto& m : mean) m /= static_cast<double>(size() * area);
    return mean;
}

}  // namespace pbsn
