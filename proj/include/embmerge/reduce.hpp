#pragma once

#include <cstddef>

namespace embmerge {

namespace detail {

template <typename Scalar, typename ElemFn>
Scalar pairwise_reduce_impl(std::size_t lo, std::size_t hi, const ElemFn& elem) {
    const std::size_t n = hi - lo;
    if (n <= 64) {
        Scalar acc = Scalar(0);
        for (std::size_t i = lo; i < hi; ++i) acc += elem(i);
        return acc;
    }
    const std::size_t mid = lo + n / 2;
    return pairwise_reduce_impl<Scalar>(lo, mid, elem) +
           pairwise_reduce_impl<Scalar>(mid, hi, elem);
}

}  // namespace detail

/// Fixed pairwise-tree reduction: the summation order depends only on n, so
/// results are identical regardless of how callers partition outer work.
template <typename Scalar, typename ElemFn>
Scalar pairwise_reduce(std::size_t n, const ElemFn& elem) {
    if (n == 0) return Scalar(0);
    return detail::pairwise_reduce_impl<Scalar>(0, n, elem);
}

template <typename Scalar>
Scalar pairwise_sum(const Scalar* x, std::size_t n) {
    return pairwise_reduce<Scalar>(n, [x](std::size_t i) { return x[i]; });
}

template <typename Scalar>
Scalar pairwise_dot(const Scalar* a, const Scalar* b, std::size_t n) {
    return pairwise_reduce<Scalar>(n, [a, b](std::size_t i) { return a[i] * b[i]; });
}

}  // namespace embmerge
