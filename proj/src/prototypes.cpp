#include "pbsn/prototypes.hpp"

#include <algorithm>
#include <numeric>

#include "pbsn/errors.hpp"
#include "pbsn/ops.hpp"
#include "pbsn/rng.hpp"

namespace pbsn {

std::vector<std::size_t> PrototypeStore::class_histogram() const {
    std::vector<std::size_t> h(classes, 0);
    for (int l : labels) ++h.at(static_cast<std::size_t>(l));
    return h;
}

PrototypeStore PrototypeStore::sample(const Dataset& train, std::size_t per_class,
                                      std::uint64_t seed) {
    if (per_class == 0) throw ConfigError("prototypes_per_class must be positive");
    PrototypeStore store;
    store.classes = train.classes;
    Rng rng = Rng::derive(seed, 0x9407ULL);
    std::vector<char> chosen(train.size(), 0);
    for (std::size_t c = 0; c < train.classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < train.size(); ++i) {
            if (train.labels[i] == static_cast<int>(c)) members.push_back(i);
        }
        if (members.size() < per_class) {
            throw ConfigError("prototypes_per_class: class " + std::to_string(c) + " has only " +
                              std::to_string(members.size()) + " samples");
        }
        rng.shuffle(members);
        for (std::size_t j = 0; j < per_class; ++j) {
            store.ids.push_back(members[j]);
            store.labels.push_back(static_cast<int>(c));
            chosen[members[j]] = 1;
        }
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (!chosen[i]) store.pool.push_back(i);
    }
    store.images = train.gather(store.ids);
    store.importance =
        Tensor::parameter({store.ids.size()}, std::vector<double>(store.ids.size(), kInitialImportance));
    return store;
}

void PrototypeStore::swap_in(std::size_t slot, std::size_t id, const Dataset& train) {
    if (slot >= ids.size()) throw ReplacementError("swap_in: slot out of range");
    auto it = std::lower_bound(pool.begin(), pool.end(), id);
    if (it == pool.end() || *it != id) {
        throw ReplacementError("swap_in: sample " + std::to_string(id) + " is not in D");
    }
    pool.erase(it);
    pool.insert(std::lower_bound(pool.begin(), pool.end(), ids[slot]), ids[slot]);
    ids[slot] = id;
    labels[slot] = train.labels[id];
    const std::size_t n = train.image_size();
    const auto src = train.images.values().subspan(id * n, n);
    std::copy(src.begin(), src.end(), images.mutable_values().begin() + static_cast<std::ptrdiff_t>(slot * n));
}

void PrototypeStore::retain(std::span<const std::size_t> slots) {
    const std::size_t n = images.size() / std::max<std::size_t>(ids.size(), 1);
    std::vector<std::size_t> new_ids;
    std::vector<int> new_labels;
    std::vector<double> new_images, new_m;
    std::vector<char> keep(ids.size(), 0);
    for (auto s : slots) keep.at(s) = 1;
    const auto iv = images.values();
    const auto mv = importance.values();
    for (std::size_t k = 0; k < ids.size(); ++k) {
        if (keep[k]) {
            new_ids.push_back(ids[k]);
            new_labels.push_back(labels[k]);
            new_images.insert(new_images.end(), iv.begin() + static_cast<std::ptrdiff_t>(k * n),
                              iv.begin() + static_cast<std::ptrdiff_t>((k + 1) * n));
            new_m.push_back(mv[k]);
        } else {
            pool.insert(std::lower_bound(pool.begin(), pool.end(), ids[k]), ids[k]);
        }
    }
    Shape shape = images.shape();
    shape[0] = new_ids.size();
    ids = std::move(new_ids);
    labels = std::move(new_labels);
    images = Tensor(shape, std::move(new_images));
    importance = Tensor::parameter({ids.size()}, std::move(new_m));
}

double threshold(std::span<const double> importance, std::size_t p) {
    if (p < 1 || p > importance.size()) {
        throw ParameterError("threshold: p = " + std::to_string(p) + " outside [1, " +
                             std::to_string(importance.size()) + "]");
    }
    std::vector<double> sorted(importance.begin(), importance.end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(p - 1), sorted.end());
    return sorted[p - 1];
}

std::vector<double> binary_mask(std::span<const double> importance, double tau, std::size_t p) {
    std::vector<double> mask(importance.size(), 1.0);
    std::size_t zeros = 0;
    for (std::size_t k = 0; k < importance.size(); ++k) {
        if (importance[k] < tau) {
            mask[k] = 0.0;
            ++zeros;
        }
    }
    for (std::size_t k = 0; k < importance.size() && zeros < p; ++k) {
        if (importance[k] == tau) {
            mask[k] = 0.0;
            ++zeros;
        }
    }
    return mask;
}

std::vector<std::size_t> lowest_importance(std::span<const double> importance, std::size_t p) {
    if (p == 0) return {};
    const auto mask = binary_mask(importance, threshold(importance, p), p);
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < mask.size(); ++k) {
        if (mask[k] == 0.0) out.push_back(k);
    }
    return out;
}

Tensor straight_through_mask(const Tensor& importance, std::size_t p,
                             std::span<const double> reference) {
    const auto m = importance.values();
    if (reference.empty()) reference = m;
    if (reference.size() != m.size()) {
        throw DimensionError("straight_through_mask: reference length differs from M");
    }
    std::vector<double> out =
        p == 0 ? std::vector<double>(m.size(), 1.0) : binary_mask(reference, threshold(reference, p), p);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += m[k] - reference[k];
    return Tensor::from_op("straight_through_mask", importance.shape(), std::move(out), {importance},
                           [importance](std::span<const double> g) mutable {
                               auto d = importance.mutable_grad();
                               for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
                           });
}

Tensor masked_logits(const Tensor& z, const Tensor& mask, const Tensor& weight, const Tensor& bias) {
    if (mask.rank() != 1 || z.shape().empty() || z.shape().back() != mask.dim(0)) {
        throw DimensionError("masked_logits: mask " + shape_string(mask.shape()) +
                             " does not match z " + shape_string(z.shape()));
    }
    return ops::linear(ops::mul_last_axis(z, mask), weight, bias);
}

}  // namespace pbsn
