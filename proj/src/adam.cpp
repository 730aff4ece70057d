#include "ssem/adam.hpp"

#include <cmath>

namespace ssem {

void adam_step(AdamMoments& moments, std::int64_t step, nd::Tensor& param, const nd::Tensor& grad,
               const AdamSettings& s) {
    if (grad.shape() != param.shape()) {
        throw ShapeError("adam: gradient " + nd::shape_string(grad.shape()) + " does not match parameter " +
                         nd::shape_string(param.shape()));
    }
    if (!grad.all_finite()) throw NonFiniteError("adam: non-finite gradient");
    if (step < 1) throw Error("adam: step numbers start at 1");
    if (moments.first.shape() != param.shape()) moments.first = nd::Tensor(param.shape());
    if (moments.second.shape() != param.shape()) moments.second = nd::Tensor(param.shape());

    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(step));
    for (std::int64_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = s.beta1 * moments.first[i] + (1.0 - s.beta1) * g;
        const double v = s.beta2 * moments.second[i] + (1.0 - s.beta2) * g * g;
        moments.first[i] = static_cast<float>(m);
        moments.second[i] = static_cast<float>(v);
        const double update = s.lr * (m / c1) / (std::sqrt(v / c2) + s.eps);
        param[i] = static_cast<float>(param[i] - update);
    }
}

} // namespace ssem
