#pragma once

#include <vector>

#include "spectr/data.hpp"
#include "spectr/model.hpp"

namespace spectr::ref {

// Serial double-precision reference implementations, independent of the
// OpenMP float kernels. Used as test oracles (direct-loop convolutions,
// finite differences against an accurate forward) and as the baseline in the
// kernel benchmark. Not part of the training path.

std::vector<double> matmul(const std::vector<double>& a, int m, int k,
                           const std::vector<double>& b, int n);

// f: [L,H,W,Cin]; k: [Cout,Cin,K,K] shared across bands; zero padding K/2
std::vector<double> band_conv2d(const std::vector<double>& f, int L, int H, int W,
                                int Cin, const std::vector<double>& k, int Cout,
                                int K, const std::vector<double>& bias);
// k: [L,Cout,Cin,K,K], one filter set per band
std::vector<double> band_conv2d_per_band(const std::vector<double>& f, int L, int H,
                                         int W, int Cin, const std::vector<double>& k,
                                         int Cout, int K, const std::vector<double>& bias);
// k: [Cout,Cin,K,K,K]
std::vector<double> conv3d(const std::vector<double>& f, int L, int H, int W, int Cin,
                           const std::vector<double>& k, int Cout, int K,
                           const std::vector<double>& bias);

std::vector<double> maxpool3(const std::vector<double>& f, int L, int H, int W, int C);
std::vector<double> upsample3(const std::vector<double>& f, int L, int H, int W, int C);

std::vector<double> entmax(const std::vector<double>& x, double alpha);
std::vector<double> softmax(const std::vector<double>& x);

// Full serial forward of the network in double precision, reading the model's
// parameters and configuration. Returns the [H,W] probability map.
std::vector<double> forward_prob_map(const SpectrModel& model, const HsiCube& cube);

// dice+bce loss of the reference forward, double precision throughout
double loss(const SpectrModel& model, const HsiCube& cube, const Mask& mask);

}  // namespace spectr::ref
