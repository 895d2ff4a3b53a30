// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moeplace/trace.hpp"

namespace moeplace {

/// Train/test partition parameters; stratified keeps per-class proportions
/// within one sample of train_fraction.
struct SplitSpec {
    double train_fraction = 0.8;
    bool stratified = true;
    std::uint64_t seed = 0;
};

/// Multinomial logistic regression model over expert-activation features.
struct SoftmaxModel {
    std::vector<double> weights; // C x dim row-major
    std::vector<double> biases;  // C
    std::vector<std::string> class_labels;
    std::size_t dim = 0;
    std::vector<double> loss_history; // per accepted epoch, non-increasing

    std::size_t num_classes() const { return class_labels.size(); }
};

struct TrainParams {
    double learning_rate = 0.1;
    double l2_penalty = 1e-4;
    std::uint32_t epochs = 500;
    std::uint64_t seed = 0;
    bool scale_features = false; // optional per-feature max-abs scaling
};

/// Deterministic stratified split; every class keeps its proportion within
/// one sample and contributes at least one row to each side. Throws
/// ValidationError for classes with fewer than 2 samples.
std::pair<ActivationMatrix, ActivationMatrix> stratified_split(const ActivationMatrix &matrix,
                                                               const SplitSpec &spec);

/// L2-regularized multinomial cross-entropy loss and its analytic gradient
/// at (weights, biases). Exposed so tests can check the gradient against
/// central finite differences.
double softmax_loss_and_gradient(std::span<const double> weights, std::span<const double> biases,
                                 const ActivationMatrix &data,
                                 std::span<const std::uint32_t> class_of_row,
                                 std::size_t num_classes, double l2_penalty,
                                 std::span<double> grad_weights, std::span<double> grad_biases);

/// Full-batch gradient descent from zero-initialized parameters. The step is
/// halved whenever it would raise the loss, so the recorded loss sequence is
/// non-increasing. Class labels come from the matrix row labels; throws
/// ValidationError when fewer than 2 classes are present.
SoftmaxModel train_softmax(const ActivationMatrix &train, const TrainParams &params);

/// Per-sample class probabilities (sum to 1 within 1e-9).
std::vector<double> predict_probabilities(const SoftmaxModel &model, std::span<const double> x);

/// Fraction of rows whose argmax class (ties to the lowest class index)
/// matches the row label.
double evaluate_accuracy(const SoftmaxModel &model, const ActivationMatrix &test);

struct LayerAccuracy {
    std::uint32_t layer = 0;
    double accuracy = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    bool ok = false;
    std::string error; // set when the layer failed to split/train
};

struct ClassificationReport {
    std::vector<LayerAccuracy> layers;
    double mean_accuracy = 0.0;
    double stddev_accuracy = 0.0;
};

/// Trains one classifier per MoE layer on that layer's prefill activation
/// matrix and evaluates on the held-out split. Failed layers are recorded,
/// not fatal; the mean/stddev cover the successful layers.
ClassificationReport per_layer_classification_report(const std::vector<ActivationRecord> &records,
                                                     std::uint32_t num_experts,
                                                     const SplitSpec &split,
                                                     const TrainParams &params);

} // namespace moeplace
