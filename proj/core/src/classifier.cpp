// SPDX-License-Identifier: Apache-2.0
#include "moeplace/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "moeplace/parallel.hpp"
#include "moeplace/stats.hpp"

namespace moeplace {

namespace {

ActivationMatrix take_rows(const ActivationMatrix &m, const std::vector<std::size_t> &rows) {
    ActivationMatrix out;
    out.rows = rows.size();
    out.cols = m.cols;
    out.values.reserve(rows.size() * m.cols);
    out.row_labels.reserve(rows.size());
    out.request_ids.reserve(rows.size());
    for (std::size_t r : rows) {
        auto row = m.row(r);
        out.values.insert(out.values.end(), row.begin(), row.end());
        out.row_labels.push_back(m.row_labels[r]);
        out.request_ids.push_back(m.request_ids[r]);
    }
    return out;
}

std::vector<std::string> sorted_classes(const ActivationMatrix &m) {
    std::set<std::string> classes(m.row_labels.begin(), m.row_labels.end());
    return {classes.begin(), classes.end()};
}

std::vector<std::uint32_t> class_indices(const ActivationMatrix &m,
                                         const std::vector<std::string> &classes) {
    std::map<std::string, std::uint32_t> index;
    for (std::uint32_t c = 0; c < classes.size(); ++c)
        index[classes[c]] = c;
    std::vector<std::uint32_t> out(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        out[r] = index.at(m.row_labels[r]);
    return out;
}

// log-sum-exp stabilized softmax of logits, in place.
void softmax_inplace(std::span<double> logits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double &v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double &v : logits)
        v /= sum;
}

} // namespace

std::pair<ActivationMatrix, ActivationMatrix> stratified_split(const ActivationMatrix &matrix,
                                                               const SplitSpec &spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
        throw ConfigError("stratified_split: train_fraction must be in (0, 1)");
    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t r = 0; r < matrix.rows; ++r)
        by_class[matrix.row_labels[r]].push_back(r);

    std::mt19937_64 rng(spec.seed);
    std::vector<std::size_t> train_rows, test_rows;
    for (auto &[label, rows] : by_class) {
        if (rows.size() < 2)
            throw ValidationError("stratified_split: class '" + label + "' has " +
                                  std::to_string(rows.size()) + " sample(s), need >= 2");
        std::shuffle(rows.begin(), rows.end(), rng);
        std::size_t n_train = static_cast<std::size_t>(
            std::floor(static_cast<double>(rows.size()) * spec.train_fraction));
        n_train = std::clamp<std::size_t>(n_train, 1, rows.size() - 1);
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + n_train);
        test_rows.insert(test_rows.end(), rows.begin() + n_train, rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    return {take_rows(matrix, train_rows), take_rows(matrix, test_rows)};
}

double softmax_loss_and_gradient(std::span<const double> weights, std::span<const double> biases,
                                 const ActivationMatrix &data,
                                 std::span<const std::uint32_t> class_of_row,
                                 std::size_t num_classes, double l2_penalty,
                                 std::span<double> grad_weights, std::span<double> grad_biases) {
    const std::size_t dim = data.cols;
    const std::size_t n = data.rows;
    std::fill(grad_weights.begin(), grad_weights.end(), 0.0);
    std::fill(grad_biases.begin(), grad_biases.end(), 0.0);

    double loss = 0.0;
    std::vector<double> probs(num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        auto x = data.row(i);
        for (std::size_t c = 0; c < num_classes; ++c) {
            double z = biases[c];
            const double *w = weights.data() + c * dim;
            for (std::size_t j = 0; j < dim; ++j)
                z += w[j] * x[j];
            probs[c] = z;
        }
        softmax_inplace(probs);
        loss -= std::log(std::max(probs[class_of_row[i]], 1e-300));
        for (std::size_t c = 0; c < num_classes; ++c) {
            double err = probs[c] - (c == class_of_row[i] ? 1.0 : 0.0);
            double *gw = grad_weights.data() + c * dim;
            for (std::size_t j = 0; j < dim; ++j)
                gw[j] += err * x[j];
            grad_biases[c] += err;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    loss *= inv_n;
    for (std::size_t k = 0; k < grad_weights.size(); ++k)
        grad_weights[k] = grad_weights[k] * inv_n + l2_penalty * weights[k];
    for (std::size_t c = 0; c < num_classes; ++c)
        grad_biases[c] *= inv_n;
    double reg = 0.0;
    for (double w : weights)
        reg += w * w;
    loss += 0.5 * l2_penalty * reg;
    return loss;
}

SoftmaxModel train_softmax(const ActivationMatrix &train, const TrainParams &params) {
    if (train.rows == 0)
        throw ValidationError("train_softmax: empty training set");
    SoftmaxModel model;
    model.class_labels = sorted_classes(train);
    model.dim = train.cols;
    if (model.num_classes() < 2)
        throw ValidationError("train_softmax: need >= 2 classes, got " +
                              std::to_string(model.num_classes()));

    ActivationMatrix data = train;
    if (params.scale_features) {
        for (std::size_t j = 0; j < data.cols; ++j) {
            double mx = 0.0;
            for (std::size_t i = 0; i < data.rows; ++i)
                mx = std::max(mx, std::abs(data.at(i, j)));
            if (mx > 0.0)
                for (std::size_t i = 0; i < data.rows; ++i)
                    data.at(i, j) /= mx;
        }
    }
    auto classes = class_indices(data, model.class_labels);
    const std::size_t C = model.num_classes();
    const std::size_t dim = model.dim;

    model.weights.assign(C * dim, 0.0);
    model.biases.assign(C, 0.0);
    std::vector<double> grad_w(C * dim), grad_b(C);
    std::vector<double> next_w(C * dim), next_b(C);
    std::vector<double> scratch_gw(C * dim), scratch_gb(C);

    double lr = params.learning_rate;
    double loss = softmax_loss_and_gradient(model.weights, model.biases, data, classes, C,
                                            params.l2_penalty, grad_w, grad_b);
    model.loss_history.push_back(loss);
    for (std::uint32_t epoch = 0; epoch < params.epochs; ++epoch) {
        bool stepped = false;
        while (lr > 1e-12) {
            for (std::size_t k = 0; k < next_w.size(); ++k)
                next_w[k] = model.weights[k] - lr * grad_w[k];
            for (std::size_t c = 0; c < C; ++c)
                next_b[c] = model.biases[c] - lr * grad_b[c];
            double next_loss = softmax_loss_and_gradient(next_w, next_b, data, classes, C,
                                                         params.l2_penalty, scratch_gw, scratch_gb);
            if (next_loss <= loss) {
                model.weights.swap(next_w);
                model.biases.swap(next_b);
                grad_w.swap(scratch_gw);
                grad_b.swap(scratch_gb);
                loss = next_loss;
                stepped = true;
                break;
            }
            lr *= 0.5; // step would raise the loss
        }
        if (!stepped)
            break;
        model.loss_history.push_back(loss);
    }

    if (params.scale_features) {
        // fold the scaling back into the weights so prediction sees raw counts
        for (std::size_t j = 0; j < dim; ++j) {
            double mx = 0.0;
            for (std::size_t i = 0; i < train.rows; ++i)
                mx = std::max(mx, std::abs(train.at(i, j)));
            if (mx > 0.0)
                for (std::size_t c = 0; c < C; ++c)
                    model.weights[c * dim + j] /= mx;
        }
    }
    return model;
}

std::vector<double> predict_probabilities(const SoftmaxModel &model, std::span<const double> x) {
    if (x.size() != model.dim)
        throw ValidationError("predict_probabilities: feature dimension mismatch");
    std::vector<double> probs(model.num_classes());
    for (std::size_t c = 0; c < probs.size(); ++c) {
        double z = model.biases[c];
        const double *w = model.weights.data() + c * model.dim;
        for (std::size_t j = 0; j < model.dim; ++j)
            z += w[j] * x[j];
        probs[c] = z;
    }
    softmax_inplace(probs);
    return probs;
}

double evaluate_accuracy(const SoftmaxModel &model, const ActivationMatrix &test) {
    if (test.rows == 0)
        throw ValidationError("evaluate_accuracy: empty test set");
    std::map<std::string, std::uint32_t> index;
    for (std::uint32_t c = 0; c < model.class_labels.size(); ++c)
        index[model.class_labels[c]] = c;

    std::size_t correct = 0;
    for (std::size_t r = 0; r < test.rows; ++r) {
        auto probs = predict_probabilities(model, test.row(r));
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < probs.size(); ++c)
            if (probs[c] > probs[argmax]) // ties keep the lowest class index
                argmax = c;
        auto truth = index.find(test.row_labels[r]);
        if (truth != index.end() && truth->second == argmax)
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.rows);
}

ClassificationReport per_layer_classification_report(const std::vector<ActivationRecord> &records,
                                                     std::uint32_t num_experts,
                                                     const SplitSpec &split,
                                                     const TrainParams &params) {
    auto layers = layers_present(records, Stage::prefill);
    if (layers.empty())
        throw EmptySelectionError("per_layer_classification_report: no prefill records");

    ClassificationReport report;
    report.layers.resize(layers.size());
    parallel_for(layers.size(), [&](std::size_t i) {
        LayerAccuracy &entry = report.layers[i];
        entry.layer = layers[i];
        try {
            auto matrix = build_activation_matrix(records, num_experts, layers[i], Stage::prefill);
            auto [train, test] = stratified_split(matrix, split);
            auto model = train_softmax(train, params);
            entry.accuracy = evaluate_accuracy(model, test);
            entry.n_train = train.rows;
            entry.n_test = test.rows;
            entry.ok = true;
        } catch (const std::exception &e) {
            entry.ok = false;
            entry.error = e.what();
        }
    });

    std::vector<double> accuracies;
    for (const auto &entry : report.layers)
        if (entry.ok)
            accuracies.push_back(entry.accuracy);
    if (accuracies.empty())
        throw ValidationError("per_layer_classification_report: every layer failed");
    report.mean_accuracy = mean(accuracies);
    report.stddev_accuracy = sample_stddev(accuracies);
    return report;
}

} // namespace moeplace
