#pragma once

#include <cstddef>
#include <vector>

#include "ucam/tensor.hpp"

namespace ucam {

/// Valid-frame indicator of a padded batch: frame t of utterance b is real
/// iff t < lengths[b]. Every normalization, attention and loss reduction in
/// the model goes through one of these.
class SequenceMask {
  public:
    SequenceMask(std::vector<std::size_t> lengths, std::size_t max_len);

    // max_len taken as the longest length.
    static SequenceMask from_lengths(std::vector<std::size_t> lengths);

    std::size_t batch() const { return lengths_.size(); }
    std::size_t max_len() const { return max_len_; }
    std::size_t length(std::size_t b) const { return lengths_[b]; }
    const std::vector<std::size_t>& lengths() const { return lengths_; }
    bool valid(std::size_t b, std::size_t t) const { return t < lengths_[b]; }
    std::size_t valid_frames() const;

  private:
    std::vector<std::size_t> lengths_;
    std::size_t max_len_;
};

template <typename T>
struct NormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    double eps = 1e-5;

    static NormParams identity(std::size_t dim, double eps = 1e-5);
};

enum class LayerNormStats {
    per_frame,      // mean/variance over the features of one frame
    per_utterance,  // mean/variance over all valid frames and features of one utterance
};

// Zeroes every padded frame. time_axis selects which axis of x is time; axis 0
// is always the batch.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& x, const SequenceMask& mask, std::size_t time_axis = 1);

// x[B,T,D]. Output at padded frames is zero and no statistic reads them.
template <typename T>
Tensor<T> utterance_layernorm(const Tensor<T>& x, const SequenceMask& mask, const NormParams<T>& p,
                              LayerNormStats stats = LayerNormStats::per_frame);

// x[B,C,T] or [B,C,F,T]; time is the last axis. Statistics per (utterance,
// channel) over the valid frames (and F for 4-D input). No running averages.
template <typename T>
Tensor<T> utterance_batchnorm(const Tensor<T>& x, const SequenceMask& mask, const NormParams<T>& p);

// scores[B,H,T,T] softmaxed over the key axis. Padded keys get exactly zero
// weight; padded query rows are all zero.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const SequenceMask& mask);

}  // namespace ucam
