#ifndef TWINS_DATASET_HPP
#define TWINS_DATASET_HPP

#include "twins/tensor.hpp"

namespace twins {

/// Images [N,C,H,W] on the [0,1] scale with class labels in [0, classes).
template <typename Scalar>
struct Dataset {
  Tensor<Scalar> images;
  Labels labels;
  Index classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }

  Dataset subset(const std::vector<Index>& rows) const {
    Dataset out{gather_rows(images, rows), {}, classes};
    out.labels.reserve(rows.size());
    for (Index r : rows) out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    return out;
  }

  template <typename To>
  Dataset<To> cast() const {
    return {images.template cast<To>(), labels, classes};
  }
};

}  // namespace twins

#endif  // TWINS_DATASET_HPP
