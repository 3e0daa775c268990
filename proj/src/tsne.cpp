#include "devstyle/tsne.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace devstyle {

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0);
  d.diagonal().setZero();
  return d;
}

Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& sq_dist, double perplexity) {
  const Eigen::Index n = sq_dist.rows();
  const double target = std::log(perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd row(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, sq_dist(i, j));
    for (int it = 0; it < 200; ++it) {
      // Shifting by the nearest distance keeps exp() away from underflow.
      double sum = 0.0, wsum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * (sq_dist(i, j) - dmin));
        sum += row(j);
        wsum += row(j) * (sq_dist(i, j) - dmin);
      }
      const double h = std::log(sum) + beta * wsum / sum;
      const double diff = h - target;
      row /= sum;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    p.row(i) = row.transpose();
  }
  return p;
}

namespace {

Eigen::MatrixXd pca_init(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  // Gram-matrix eigenproblem: n x n regardless of the input dimension.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c * c.transpose());
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd y(n, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(n - 1 - k) * std::sqrt(std::max(es.eigenvalues()(n - 1 - k), 0.0));
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    y.col(k) = v;
  }
  const double mean0 = y.col(0).mean();
  const double sd = std::sqrt((y.col(0).array() - mean0).square().mean());
  return sd > 0 ? Eigen::MatrixXd(y / sd * 1e-4) : y;
}

double kl_divergence(const Eigen::MatrixXd& p, const Eigen::MatrixXd& y) {
  const Eigen::MatrixXd d = squared_distances(y);
  const Eigen::Index n = y.rows();
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) z += 1.0 / (1.0 + d(i, j));
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || p(i, j) <= 0) continue;
      const double q = std::max(1.0 / (1.0 + d(i, j)) / z, 1e-300);
      kl += p(i, j) * std::log(p(i, j) / q);
    }
  return kl;
}

}  // namespace

TsneResult tsne(const Eigen::MatrixXd& x, const TsneOptions& o) {
  const Eigen::Index n = x.rows();
  if (!(o.perplexity > 0)) throw std::invalid_argument("tsne: perplexity must be positive");
  if (static_cast<double>(n) < 3.0 * o.perplexity)
    throw std::invalid_argument("tsne: need at least 3 * perplexity points, got " + std::to_string(n));

  const Eigen::MatrixXd cond = conditional_affinities(squared_distances(x), o.perplexity);
  Eigen::MatrixXd p = (cond + cond.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  TsneResult r;
  Eigen::MatrixXd y = pca_init(x);
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2);

  for (int it = 0; it < o.iterations; ++it) {
    if (it == o.exaggeration_iters) {
      // Each phase starts from rest, as two separate descents.
      update.setZero();
      gains.setOnes();
    }
    const bool early = it < o.exaggeration_iters;
    const double ex = early ? o.exaggeration : 1.0;
    const double momentum = early ? o.momentum_early : o.momentum_late;

    num = (1.0 + squared_distances(y).array()).inverse().matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    // (p_ij - q_ij) * num_ij, with q_ij = num_ij / z
    const Eigen::MatrixXd w = ((ex * p).array() - num.array() / z).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);

    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 0; k < 2; ++k) {
        const bool same = (grad(i, k) > 0) == (update(i, k) > 0);
        gains(i, k) = same ? std::max(gains(i, k) * 0.8, o.min_gain) : gains(i, k) + 0.2;
      }
    update = momentum * update - o.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();

    if ((it + 1) % o.kl_every == 0 || it + 1 == o.iterations) r.kl_trace.emplace_back(it + 1, kl_divergence(p, y));
  }
  r.embedding = std::move(y);
  return r;
}

std::vector<ProjectedPoint> project_embeddings_2d(const std::vector<DeviceEmbedding>& embeddings, double perplexity,
                                                  TsneResult* detail) {
  if (embeddings.empty()) throw std::invalid_argument("project_embeddings_2d: no embeddings");
  const Eigen::Index n = static_cast<Eigen::Index>(embeddings.size());
  const Eigen::Index d = static_cast<Eigen::Index>(embeddings.front().vector.size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& v = embeddings[static_cast<std::size_t>(i)].vector;
    if (static_cast<Eigen::Index>(v.size()) != d) throw std::invalid_argument("project_embeddings_2d: ragged input");
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = v[static_cast<std::size_t>(k)];
  }
  TsneOptions o;
  o.perplexity = perplexity;
  auto r = tsne(x, o);
  std::vector<ProjectedPoint> out(embeddings.size());
  for (Eigen::Index i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = {r.embedding(i, 0), r.embedding(i, 1),
                                        embeddings[static_cast<std::size_t>(i)].device_name};
  if (detail) *detail = std::move(r);
  return out;
}

double silhouette_score(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
  const Eigen::Index n = points.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("silhouette_score: label count");
  std::map<int, int> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette_score: need at least two clusters");
  const Eigen::MatrixXd d = squared_distances(points).cwiseSqrt();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    if (sizes[li] == 1) continue;
    std::map<int, double> sum;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sum[labels[static_cast<std::size_t>(j)]] += d(i, j);
    const double a = sum[li] / (sizes[li] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, s] : sum)
      if (l != li) b = std::min(b, s / sizes[l]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

double silhouette_score(const std::vector<ProjectedPoint>& points) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(points.size()), 2);
  std::map<std::string, int> ids;
  std::vector<int> labels;
  for (std::size_t i = 0; i < points.size(); ++i) {
    y(static_cast<Eigen::Index>(i), 0) = points[i].x;
    y(static_cast<Eigen::Index>(i), 1) = points[i].y;
    labels.push_back(ids.emplace(points[i].device_name, static_cast<int>(ids.size())).first->second);
  }
  return silhouette_score(y, labels);
}

}  // namespace devstyle
