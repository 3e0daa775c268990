#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "devstyle/embeddings.hpp"

namespace devstyle {

struct TsneOptions {
  double perplexity = 15.0;
  int iterations = 1000;
  int exaggeration_iters = 250;
  double exaggeration = 12.0;
  double learning_rate = 50.0;
  double momentum_early = 0.5;
  double momentum_late = 0.8;
  double min_gain = 0.01;
  int kl_every = 10;
};

struct TsneResult {
  Eigen::MatrixXd embedding;  // n x 2
  // (iteration, KL(P || Q)) with the unexaggerated P, every kl_every iterations and at the end.
  std::vector<std::pair<int, double>> kl_trace;
};

// Exact t-SNE with perplexity-calibrated affinities and PCA initialisation.
// Rows of x are points. Requires at least 3 * perplexity points.
TsneResult tsne(const Eigen::MatrixXd& x, const TsneOptions& options = {});

// Row-normalised conditional affinities p_{j|i} hitting the target perplexity.
Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& sq_dist, double perplexity);
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x);

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  std::string device_name;
};

std::vector<ProjectedPoint> project_embeddings_2d(const std::vector<DeviceEmbedding>& embeddings,
                                                  double perplexity = 15.0, TsneResult* detail = nullptr);

// Mean silhouette over points with Euclidean distance; singleton clusters score 0.
double silhouette_score(const Eigen::MatrixXd& points, const std::vector<int>& labels);
double silhouette_score(const std::vector<ProjectedPoint>& points);

}  // namespace devstyle
