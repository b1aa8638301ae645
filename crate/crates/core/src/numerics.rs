//! Dense 2-D map containers and the layer-level primitives the network is
//! built from: valid convolution, non-overlapping max-pooling, the scaled
//! hyperbolic-tangent activation, softmax, and the backward pass of each.
//!
//! Everything here is a pure function of its inputs; all arithmetic is done
//! in `f64`.

use crate::error::{Error, Result};

/// A dense 2-D map of real values in row-major order.
///
/// Holds one feature map or one convolution filter. Constructors reject
/// non-finite values, so maps built from finite inputs stay finite through
/// every operation in this module.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Map2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "Map2D dimensions must be positive");
        Map2D {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Builds a map from row-major values; length must equal `height * width`
    /// and every value must be finite.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(
                "Map2D dimensions must be positive".into(),
            ));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                axis: "map values",
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("Map2D values must be finite".into()));
        }
        Ok(Map2D {
            height,
            width,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("Map2D needs at least one row".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidInput("Map2D rows must be equal length".into()));
        }
        Map2D::from_values(rows.len(), width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map2D {
        Map2D {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// An ordered set of equally-sized feature maps; the unit that flows between
/// layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    maps: Vec<Map2D>,
}

impl FeatureStack {
    /// Builds a stack; every map must share the dimensions of the first.
    pub fn new(maps: Vec<Map2D>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidInput("feature stack must be non-empty".into()))?;
        let (h, w) = (first.height, first.width);
        for m in &maps {
            if m.height != h {
                return Err(Error::ShapeMismatch {
                    axis: "stack map height",
                    expected: h,
                    actual: m.height,
                });
            }
            if m.width != w {
                return Err(Error::ShapeMismatch {
                    axis: "stack map width",
                    expected: w,
                    actual: m.width,
                });
            }
        }
        Ok(FeatureStack { maps })
    }

    pub fn from_single(map: Map2D) -> Self {
        FeatureStack { maps: vec![map] }
    }

    pub fn zeros(maps: usize, height: usize, width: usize) -> Self {
        assert!(maps > 0, "feature stack must be non-empty");
        FeatureStack {
            maps: (0..maps).map(|_| Map2D::zeros(height, width)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height
    }

    pub fn width(&self) -> usize {
        self.maps[0].width
    }

    pub fn map(&self, index: usize) -> &Map2D {
        &self.maps[index]
    }

    pub fn maps(&self) -> &[Map2D] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Map2D] {
        &mut self.maps
    }

    /// Element-wise transform of every map.
    pub fn map_values(&self, f: impl Fn(f64) -> f64 + Copy) -> FeatureStack {
        FeatureStack {
            maps: self.maps.iter().map(|m| m.map(f)).collect(),
        }
    }

    /// Flattens map-major, then row, then column.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.maps.len() * self.height() * self.width());
        for m in &self.maps {
            out.extend_from_slice(&m.values);
        }
        out
    }
}

/// A grid of equally-sized square filters indexed `[input map i][output map j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrid {
    input_maps: usize,
    output_maps: usize,
    size: usize,
    filters: Vec<Map2D>, // index i * output_maps + j
}

impl FilterGrid {
    pub fn zeros(input_maps: usize, output_maps: usize, size: usize) -> Self {
        assert!(input_maps > 0 && output_maps > 0 && size > 0);
        FilterGrid {
            input_maps,
            output_maps,
            size,
            filters: (0..input_maps * output_maps)
                .map(|_| Map2D::zeros(size, size))
                .collect(),
        }
    }

    /// Builds a grid from filters listed input-map-major. All must be square
    /// with the same side.
    pub fn new(input_maps: usize, output_maps: usize, filters: Vec<Map2D>) -> Result<Self> {
        if input_maps == 0 || output_maps == 0 {
            return Err(Error::InvalidInput(
                "filter grid needs at least one input and one output map".into(),
            ));
        }
        if filters.len() != input_maps * output_maps {
            return Err(Error::ShapeMismatch {
                axis: "filter count",
                expected: input_maps * output_maps,
                actual: filters.len(),
            });
        }
        let size = filters[0].height;
        for f in &filters {
            if f.height != size || f.width != size {
                return Err(Error::ShapeMismatch {
                    axis: "filter size",
                    expected: size,
                    actual: f.height.max(f.width),
                });
            }
        }
        Ok(FilterGrid {
            input_maps,
            output_maps,
            size,
            filters,
        })
    }

    pub fn input_maps(&self) -> usize {
        self.input_maps
    }

    pub fn output_maps(&self) -> usize {
        self.output_maps
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn at(&self, input_map: usize, output_map: usize) -> &Map2D {
        &self.filters[input_map * self.output_maps + output_map]
    }

    #[inline]
    pub fn at_mut(&mut self, input_map: usize, output_map: usize) -> &mut Map2D {
        &mut self.filters[input_map * self.output_maps + output_map]
    }

    /// Filters in input-map-major order.
    pub fn filters(&self) -> &[Map2D] {
        &self.filters
    }

    pub fn filters_mut(&mut self) -> &mut [Map2D] {
        &mut self.filters
    }
}

/// Argmax positions recorded by a max-pool forward pass, needed to route the
/// gradient back to the selected cells.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    region: usize,
    input_height: usize,
    input_width: usize,
    output_height: usize,
    output_width: usize,
    /// Per map, per output cell in row-major order: (row, col) of the selected
    /// input element, in input coordinates.
    argmax: Vec<Vec<(usize, usize)>>,
}

impl PoolTrace {
    pub fn region(&self) -> usize {
        self.region
    }

    pub fn output_height(&self) -> usize {
        self.output_height
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn argmax(&self, map: usize, out_row: usize, out_col: usize) -> (usize, usize) {
        self.argmax[map][out_row * self.output_width + out_col]
    }
}

/// Valid convolution of a stack against a filter grid, stride one:
/// `output[j] = sum_i input[i] * filter[i][j] + bias[j]`, output size
/// `(H-k+1) x (W-k+1)`. Correlation orientation (no kernel flip); no
/// activation applied.
pub fn convolve_valid(
    input: &FeatureStack,
    filters: &FilterGrid,
    biases: &[f64],
) -> Result<FeatureStack> {
    if filters.input_maps != input.len() {
        return Err(Error::ShapeMismatch {
            axis: "filter grid input maps",
            expected: input.len(),
            actual: filters.input_maps,
        });
    }
    if biases.len() != filters.output_maps {
        return Err(Error::ShapeMismatch {
            axis: "bias count",
            expected: filters.output_maps,
            actual: biases.len(),
        });
    }
    let (h, w, k) = (input.height(), input.width(), filters.size);
    if k > h || k > w {
        return Err(Error::ShapeMismatch {
            axis: "filter size vs input",
            expected: h.min(w),
            actual: k,
        });
    }
    let (out_h, out_w) = (h - k + 1, w - k + 1);

    let mut output = Vec::with_capacity(filters.output_maps);
    for (j, &bias) in biases.iter().enumerate() {
        let mut out = Map2D::zeros(out_h, out_w);
        out.values.fill(bias);
        for i in 0..input.len() {
            accumulate_correlation(input.map(i), filters.at(i, j), &mut out);
        }
        output.push(out);
    }
    FeatureStack::new(output)
}

/// out += input (*) filter, valid correlation. `out` must be (H-k+1)x(W-k+1).
fn accumulate_correlation(input: &Map2D, filter: &Map2D, out: &mut Map2D) {
    let k = filter.height;
    let out_w = out.width;
    for y in 0..out.height {
        let out_row = out.row_mut(y);
        for p in 0..k {
            let in_row = input.row(y + p);
            let f_row = filter.row(p);
            for (q, &fv) in f_row.iter().enumerate() {
                let window = &in_row[q..q + out_w];
                for (o, &v) in out_row.iter_mut().zip(window) {
                    *o += fv * v;
                }
            }
        }
    }
}

/// Max-pooling over non-overlapping `region x region` blocks. Trailing rows
/// and columns that do not fill a whole block are truncated. Argmax ties break
/// to the first occurrence in row-major scan order.
pub fn maxpool(input: &FeatureStack, region: usize) -> Result<(FeatureStack, PoolTrace)> {
    let (h, w) = (input.height(), input.width());
    if region == 0 {
        return Err(Error::InvalidInput("pool region must be positive".into()));
    }
    if region > h || region > w {
        return Err(Error::ShapeMismatch {
            axis: "pool region vs input",
            expected: h.min(w),
            actual: region,
        });
    }
    let (out_h, out_w) = (h / region, w / region);

    let mut out_maps = Vec::with_capacity(input.len());
    let mut argmax = Vec::with_capacity(input.len());
    for m in &input.maps {
        let mut out = Map2D::zeros(out_h, out_w);
        let mut trace = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (mut best, mut best_pos) = (f64::NEG_INFINITY, (0, 0));
                for dy in 0..region {
                    let y = oy * region + dy;
                    let row = m.row(y);
                    for dx in 0..region {
                        let x = ox * region + dx;
                        if row[x] > best {
                            best = row[x];
                            best_pos = (y, x);
                        }
                    }
                }
                out.set(oy, ox, best);
                trace.push(best_pos);
            }
        }
        out_maps.push(out);
        argmax.push(trace);
    }
    let trace = PoolTrace {
        region,
        input_height: h,
        input_width: w,
        output_height: out_h,
        output_width: out_w,
        argmax,
    };
    Ok((FeatureStack { maps: out_maps }, trace))
}

/// Activation scale constants for `1.7159 * tanh(2x/3)`.
pub const ACTIVATION_AMPLITUDE: f64 = 1.7159;
pub const ACTIVATION_SLOPE: f64 = 2.0 / 3.0;

/// Scaled hyperbolic tangent `1.7159 * tanh(2x/3)`.
#[inline]
pub fn activation(x: f64) -> f64 {
    ACTIVATION_AMPLITUDE * (ACTIVATION_SLOPE * x).tanh()
}

/// Derivative of [`activation`]: `1.7159 * (2/3) * (1 - tanh^2(2x/3))`.
#[inline]
pub fn activation_derivative(x: f64) -> f64 {
    let t = (ACTIVATION_SLOPE * x).tanh();
    ACTIVATION_AMPLITUDE * ACTIVATION_SLOPE * (1.0 - t * t)
}

/// Numerically stabilized softmax: subtracts the max logit before
/// exponentiation. Output is non-negative and sums to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax needs at least one logit");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Gradients produced by [`backward_convolve`].
#[derive(Debug, Clone)]
pub struct ConvGradients {
    pub input: FeatureStack,
    pub filters: FilterGrid,
    pub biases: Vec<f64>,
}

/// Backward pass of [`convolve_valid`]: gradients with respect to the input
/// stack, the filters, and the biases, given the gradient at the output.
pub fn backward_convolve(
    input: &FeatureStack,
    filters: &FilterGrid,
    upstream: &FeatureStack,
) -> Result<ConvGradients> {
    if filters.input_maps != input.len() {
        return Err(Error::ShapeMismatch {
            axis: "filter grid input maps",
            expected: input.len(),
            actual: filters.input_maps,
        });
    }
    if upstream.len() != filters.output_maps {
        return Err(Error::ShapeMismatch {
            axis: "upstream maps",
            expected: filters.output_maps,
            actual: upstream.len(),
        });
    }
    let k = filters.size;
    let (out_h, out_w) = (input.height() - k + 1, input.width() - k + 1);
    if upstream.height() != out_h || upstream.width() != out_w {
        return Err(Error::ShapeMismatch {
            axis: "upstream map size",
            expected: out_h * out_w,
            actual: upstream.height() * upstream.width(),
        });
    }

    let mut d_input = FeatureStack::zeros(input.len(), input.height(), input.width());
    let mut d_filters = FilterGrid::zeros(filters.input_maps, filters.output_maps, k);
    let mut d_biases = vec![0.0; filters.output_maps];

    for (j, d_bias) in d_biases.iter_mut().enumerate() {
        let up = upstream.map(j);
        *d_bias = up.values.iter().sum();
        for i in 0..input.len() {
            // dF[i][j][p][q] = sum_{y,x} up[y][x] * in[y+p][x+q]
            let inp = input.map(i);
            let df = d_filters.at_mut(i, j);
            for p in 0..k {
                for y in 0..out_h {
                    let up_row = up.row(y);
                    let in_row = inp.row(y + p);
                    let df_row = df.row_mut(p);
                    for (q, dfv) in df_row.iter_mut().enumerate() {
                        let window = &in_row[q..q + out_w];
                        let mut acc = 0.0;
                        for (&u, &v) in up_row.iter().zip(window) {
                            acc += u * v;
                        }
                        *dfv += acc;
                    }
                }
            }
            // dIn[i][y+p][x+q] += up[y][x] * F[p][q]
            let f = filters.at(i, j);
            let di = &mut d_input.maps[i];
            for y in 0..out_h {
                let up_row = up.row(y);
                for p in 0..k {
                    let f_row = f.row(p);
                    let di_row = di.row_mut(y + p);
                    for (q, &fv) in f_row.iter().enumerate() {
                        let target = &mut di_row[q..q + out_w];
                        for (t, &u) in target.iter_mut().zip(up_row) {
                            *t += u * fv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGradients {
        input: d_input,
        filters: d_filters,
        biases: d_biases,
    })
}

/// Backward pass of [`maxpool`]: routes each upstream gradient cell to the
/// input position its maximum came from; everything else receives zero.
pub fn backward_maxpool(trace: &PoolTrace, upstream: &FeatureStack) -> Result<FeatureStack> {
    if upstream.len() != trace.argmax.len() {
        return Err(Error::ShapeMismatch {
            axis: "upstream maps",
            expected: trace.argmax.len(),
            actual: upstream.len(),
        });
    }
    if upstream.height() != trace.output_height || upstream.width() != trace.output_width {
        return Err(Error::ShapeMismatch {
            axis: "upstream map size",
            expected: trace.output_height * trace.output_width,
            actual: upstream.height() * upstream.width(),
        });
    }
    let mut d_input = FeatureStack::zeros(upstream.len(), trace.input_height, trace.input_width);
    for (m, cells) in trace.argmax.iter().enumerate() {
        let up = upstream.map(m);
        let di = &mut d_input.maps[m];
        for (cell, &(y, x)) in cells.iter().enumerate() {
            let oy = cell / trace.output_width;
            let ox = cell % trace.output_width;
            let w = di.width;
            di.values[y * w + x] += up.at(oy, ox);
        }
    }
    Ok(d_input)
}

/// Backward pass of the element-wise activation: multiplies the upstream
/// gradient by the derivative evaluated at the recorded pre-activations.
pub fn backward_activation(
    pre_activation: &FeatureStack,
    upstream: &FeatureStack,
) -> Result<FeatureStack> {
    if pre_activation.len() != upstream.len()
        || pre_activation.height() != upstream.height()
        || pre_activation.width() != upstream.width()
    {
        return Err(Error::ShapeMismatch {
            axis: "activation gradient size",
            expected: pre_activation.len() * pre_activation.height() * pre_activation.width(),
            actual: upstream.len() * upstream.height() * upstream.width(),
        });
    }
    let maps = pre_activation
        .maps
        .iter()
        .zip(&upstream.maps)
        .map(|(pre, up)| {
            let values = pre
                .values
                .iter()
                .zip(&up.values)
                .map(|(&z, &u)| u * activation_derivative(z))
                .collect();
            Map2D {
                height: pre.height,
                width: pre.width,
                values,
            }
        })
        .collect();
    Ok(FeatureStack { maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map2D {
        Map2D::from_values(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> FeatureStack {
        FeatureStack::new((0..n).map(|_| random_map(rng, h, w)).collect()).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, i: usize, j: usize, k: usize) -> FilterGrid {
        FilterGrid::new(i, j, (0..i * j).map(|_| random_map(rng, k, k)).collect()).unwrap()
    }

    #[test]
    fn conv_identity_filter_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_stack(&mut rng, 1, 5, 4);
        let filters = FilterGrid::new(1, 1, vec![Map2D::from_values(1, 1, vec![1.0]).unwrap()])
            .unwrap();
        let out = convolve_valid(&input, &filters, &[0.0]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_output_size_matches_valid_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_stack(&mut rng, 1, 78, 78);
        let filters = random_grid(&mut rng, 1, 6, 7);
        let out = convolve_valid(&input, &filters, &[0.0; 6]).unwrap();
        assert_eq!((out.len(), out.height(), out.width()), (6, 72, 72));
    }

    #[test]
    fn conv_hand_example() {
        let input = FeatureStack::from_single(
            Map2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        );
        let filters = FilterGrid::new(
            1,
            1,
            vec![Map2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()],
        )
        .unwrap();
        let out = convolve_valid(&input, &filters, &[1.0]).unwrap();
        assert_eq!(out.map(0).values(), &[6.0]);
    }

    #[test]
    fn conv_sums_over_input_maps() {
        let a = Map2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Map2D::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap();
        let input = FeatureStack::new(vec![a, b]).unwrap();
        let one = Map2D::from_values(1, 1, vec![1.0]).unwrap();
        let filters = FilterGrid::new(2, 1, vec![one.clone(), one]).unwrap();
        let out = convolve_valid(&input, &filters, &[0.5]).unwrap();
        assert_eq!(
            out.map(0).values(),
            &[11.5, 22.5, 33.5, 44.5],
            "each cell is the sum over input maps plus the bias"
        );
    }

    #[test]
    fn conv_rejects_mismatched_filter_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_stack(&mut rng, 2, 6, 6);
        let filters = random_grid(&mut rng, 3, 4, 3);
        let err = convolve_valid(&input, &filters, &[0.0; 4]).unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                axis: "filter grid input maps",
                ..
            }
        ));
        let filters = random_grid(&mut rng, 2, 4, 3);
        let err = convolve_valid(&input, &filters, &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { axis: "bias count", .. }));
    }

    #[test]
    fn maxpool_region_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_stack(&mut rng, 2, 3, 5);
        let (out, trace) = maxpool(&input, 1).unwrap();
        assert_eq!(out, input);
        for m in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(trace.argmax(m, y, x), (y, x));
                }
            }
        }
    }

    #[test]
    fn maxpool_halves_72_to_36() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_stack(&mut rng, 6, 72, 72);
        let (out, _) = maxpool(&input, 2).unwrap();
        assert_eq!((out.len(), out.height(), out.width()), (6, 36, 36));
    }

    #[test]
    fn maxpool_two_by_two_example() {
        let input = FeatureStack::from_single(
            Map2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        );
        let (out, trace) = maxpool(&input, 2).unwrap();
        assert_eq!(out.map(0).values(), &[4.0]);
        assert_eq!(trace.argmax(0, 0, 0), (1, 1));
    }

    #[test]
    fn maxpool_truncates_trailing_remainder() {
        // Maximum lives in the truncated column; it must not leak into the output.
        let input = FeatureStack::from_single(
            Map2D::from_rows(&[
                vec![1.0, 2.0, 9.0],
                vec![3.0, 4.0, 9.0],
                vec![9.0, 9.0, 9.0],
            ])
            .unwrap(),
        );
        let (out, _) = maxpool(&input, 2).unwrap();
        assert_eq!((out.height(), out.width()), (1, 1));
        assert_eq!(out.map(0).values(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_region() {
        let input = FeatureStack::from_single(Map2D::zeros(2, 2));
        assert!(maxpool(&input, 3).is_err());
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let input = FeatureStack::from_single(
            Map2D::from_rows(&[vec![7.0, 7.0], vec![7.0, 7.0]]).unwrap(),
        );
        let (_, trace) = maxpool(&input, 2).unwrap();
        assert_eq!(trace.argmax(0, 0, 0), (0, 0));
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(activation(0.0), 0.0);
        // Saturation at +/- 1.7159.
        assert!((activation(40.0) - ACTIVATION_AMPLITUDE).abs() < 1e-12);
        assert!((activation(-40.0) + ACTIVATION_AMPLITUDE).abs() < 1e-12);
        // Direct evaluation against the library tanh as the oracle.
        let expected = ACTIVATION_AMPLITUDE * (1.0f64).tanh();
        assert!((activation(1.5) - expected).abs() < 1e-15);
        let slope_at_zero = ACTIVATION_AMPLITUDE * ACTIVATION_SLOPE;
        assert!((activation_derivative(0.0) - slope_at_zero).abs() < 1e-15);
        assert!((slope_at_zero - 1.14393).abs() < 1e-5);
    }

    #[test]
    fn activation_derivative_matches_finite_differences() {
        let eps = 1e-6;
        for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
            let fd = (activation(x + eps) - activation(x - eps)) / (2.0 * eps);
            assert!((activation_derivative(x) - fd).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let out = softmax(&[3.25; 6]);
        for v in out {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let logits = [0.2, -1.3, 2.4, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 123.456).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let out = softmax(&[1000.0, 0.0]);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-300);
        assert!(out[1] < 1e-300);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_stack(&mut rng, 2, 5, 5);
        let filters = random_grid(&mut rng, 2, 3, 2);
        let upstream = FeatureStack::zeros(3, 4, 4);
        let g = backward_convolve(&input, &filters, &upstream).unwrap();
        assert!(g.input.maps().iter().all(|m| m.values().iter().all(|&v| v == 0.0)));
        assert!(g.filters.filters().iter().all(|m| m.values().iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_identity_filter_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_stack(&mut rng, 1, 4, 4);
        let filters = FilterGrid::new(1, 1, vec![Map2D::from_values(1, 1, vec![1.0]).unwrap()])
            .unwrap();
        let upstream = random_stack(&mut rng, 1, 4, 4);
        let g = backward_convolve(&input, &filters, &upstream).unwrap();
        assert_eq!(g.input, upstream);
    }

    /// Central-difference gradient of `loss(x) = sum(weights * conv(x))` for a
    /// single scalar, used to check the analytic backward passes.
    fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random_stack(&mut rng, 2, 6, 5);
        let filters = random_grid(&mut rng, 2, 3, 3);
        let biases: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        // Random linear functional over the output makes the upstream gradient
        // exactly the functional's weights.
        let out = convolve_valid(&input, &filters, &biases).unwrap();
        let weights: Vec<Map2D> = (0..out.len())
            .map(|_| random_map(&mut rng, out.height(), out.width()))
            .collect();
        let upstream = FeatureStack::new(weights.clone()).unwrap();

        let loss = |input: &FeatureStack, filters: &FilterGrid, biases: &[f64]| -> f64 {
            let out = convolve_valid(input, filters, biases).unwrap();
            out.maps()
                .iter()
                .zip(&weights)
                .map(|(o, w)| {
                    o.values()
                        .iter()
                        .zip(w.values())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };

        let g = backward_convolve(&input, &filters, &upstream).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;

        for (mi, m) in input.maps().iter().enumerate() {
            for idx in 0..m.values().len() {
                let x = m.values()[idx];
                let fd = central_diff(
                    |v| {
                        let mut probe = input.clone();
                        probe.maps_mut()[mi].values_mut()[idx] = v;
                        loss(&probe, &filters, &biases)
                    },
                    x,
                    eps,
                );
                worst = worst.max(relative_error(g.input.map(mi).values()[idx], fd));
            }
        }
        for fi in 0..filters.filters().len() {
            for idx in 0..filters.filters()[fi].values().len() {
                let x = filters.filters()[fi].values()[idx];
                let fd = central_diff(
                    |v| {
                        let mut probe = filters.clone();
                        probe.filters_mut()[fi].values_mut()[idx] = v;
                        loss(&input, &probe, &biases)
                    },
                    x,
                    eps,
                );
                worst = worst.max(relative_error(g.filters.filters()[fi].values()[idx], fd));
            }
        }
        for bi in 0..biases.len() {
            let fd = central_diff(
                |v| {
                    let mut probe = biases.clone();
                    probe[bi] = v;
                    loss(&input, &filters, &probe)
                },
                biases[bi],
                eps,
            );
            worst = worst.max(relative_error(g.biases[bi], fd));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn maxpool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_stack(&mut rng, 2, 6, 6);
        let (out, trace) = maxpool(&input, 2).unwrap();
        let weights: Vec<Map2D> = (0..out.len())
            .map(|_| random_map(&mut rng, out.height(), out.width()))
            .collect();
        let upstream = FeatureStack::new(weights.clone()).unwrap();
        let loss = |input: &FeatureStack| -> f64 {
            let (out, _) = maxpool(input, 2).unwrap();
            out.maps()
                .iter()
                .zip(&weights)
                .map(|(o, w)| {
                    o.values()
                        .iter()
                        .zip(w.values())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };
        let g = backward_maxpool(&trace, &upstream).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (mi, m) in input.maps().iter().enumerate() {
            for idx in 0..m.values().len() {
                let fd = central_diff(
                    |v| {
                        let mut probe = input.clone();
                        probe.maps_mut()[mi].values_mut()[idx] = v;
                        loss(&probe)
                    },
                    m.values()[idx],
                    eps,
                );
                worst = worst.max(relative_error(g.map(mi).values()[idx], fd));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pre = random_stack(&mut rng, 2, 4, 3);
        let weights: Vec<Map2D> = (0..2).map(|_| random_map(&mut rng, 4, 3)).collect();
        let upstream = FeatureStack::new(weights.clone()).unwrap();
        let loss = |pre: &FeatureStack| -> f64 {
            pre.map_values(activation)
                .maps()
                .iter()
                .zip(&weights)
                .map(|(o, w)| {
                    o.values()
                        .iter()
                        .zip(w.values())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };
        let g = backward_activation(&pre, &upstream).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (mi, m) in pre.maps().iter().enumerate() {
            for idx in 0..m.values().len() {
                let fd = central_diff(
                    |v| {
                        let mut probe = pre.clone();
                        probe.maps_mut()[mi].values_mut()[idx] = v;
                        loss(&probe)
                    },
                    m.values()[idx],
                    eps,
                );
                worst = worst.max(relative_error(g.map(mi).values()[idx], fd));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn pool_trace_indices_stay_inside_their_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_stack(&mut rng, 3, 9, 9);
        let (_, trace) = maxpool(&input, 3).unwrap();
        for m in 0..3 {
            for oy in 0..trace.output_height() {
                for ox in 0..trace.output_width() {
                    let (y, x) = trace.argmax(m, oy, ox);
                    assert!(y >= oy * 3 && y < (oy + 1) * 3);
                    assert!(x >= ox * 3 && x < (ox + 1) * 3);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn conv_output_size_rule_holds(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=h.min(w));
            let input = random_stack(&mut rng, 1, h, w);
            let filters = random_grid(&mut rng, 1, 2, k);
            let out = convolve_valid(&input, &filters, &[0.0, 0.0]).unwrap();
            prop_assert_eq!((out.height(), out.width()), (h - k + 1, w - k + 1));
        }

        #[test]
        fn softmax_stays_on_simplex(logits in proptest::collection::vec(-50.0f64..50.0, 1..10)) {
            let out = softmax(&logits);
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_stack(&mut rng, 2, 5, 5);
            let y = random_stack(&mut rng, 2, 5, 5);
            let filters = random_grid(&mut rng, 2, 2, 3);
            let zero = [0.0, 0.0];

            let combined = FeatureStack::new(
                x.maps()
                    .iter()
                    .zip(y.maps())
                    .map(|(xm, ym)| {
                        Map2D::from_values(
                            5,
                            5,
                            xm.values()
                                .iter()
                                .zip(ym.values())
                                .map(|(&xv, &yv)| a * xv + b * yv)
                                .collect(),
                        )
                        .unwrap()
                    })
                    .collect(),
            )
            .unwrap();

            let lhs = convolve_valid(&combined, &filters, &zero).unwrap();
            let cx = convolve_valid(&x, &filters, &zero).unwrap();
            let cy = convolve_valid(&y, &filters, &zero).unwrap();
            for (m, (mx, my)) in lhs.maps().iter().zip(cx.maps().iter().zip(cy.maps())) {
                for ((&l, &vx), &vy) in m.values().iter().zip(mx.values()).zip(my.values()) {
                    prop_assert!((l - (a * vx + b * vy)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn maxpool_backward_conserves_gradient_mass(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rng.random_range(2usize..10);
            let w = rng.random_range(2usize..10);
            let r = rng.random_range(1..=h.min(w));
            let input = random_stack(&mut rng, 2, h, w);
            let (out, trace) = maxpool(&input, r).unwrap();
            let upstream = random_stack(&mut rng, 2, out.height(), out.width());
            let d = backward_maxpool(&trace, &upstream).unwrap();
            let up_sum: f64 = upstream.maps().iter().flat_map(|m| m.values()).sum();
            let d_sum: f64 = d.maps().iter().flat_map(|m| m.values()).sum();
            prop_assert!((up_sum - d_sum).abs() < 1e-9);
        }

        #[test]
        fn primitives_keep_values_finite(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_stack(&mut rng, 2, 6, 6);
            let filters = random_grid(&mut rng, 2, 3, 3);
            let biases: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = convolve_valid(&input, &filters, &biases).unwrap();
            prop_assert!(out.maps().iter().all(|m| m.values().iter().all(|v| v.is_finite())));
            let act = out.map_values(activation);
            prop_assert!(act.maps().iter().all(|m| m.values().iter().all(|v| v.is_finite())));
            let (pooled, _) = maxpool(&act, 2).unwrap();
            prop_assert!(pooled.maps().iter().all(|m| m.values().iter().all(|v| v.is_finite())));
        }
    }
}
