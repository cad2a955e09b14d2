//! Dense-flow I/O and dataset preparation: .flo files, pose files,
//! resizing, [0, 1] encoding, Gaussian blur, and sequence manifests with
//! virtual sub-sampling.

use crate::geometry::{self, GeometryError, MotionVector, Pose};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: malformed flow file at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    #[error("{path}:{line}: {detail}")]
    PoseParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

// ── Flow fields ──────────────────────────────────────────────────────

/// Dense optical-flow field: per-pixel (u, v) displacement in pixels/frame,
/// stored interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FlowError::Contract(format!(
                "flow dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 2 {
            return Err(FlowError::Contract(format!(
                "flow data length {} != {height}*{width}*2",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(FlowError::Contract(format!(
                "flow contains non-finite value {bad}"
            )));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let off = (row * self.width + col) * 2;
        (self.data[off], self.data[off + 1])
    }

    pub fn set(&mut self, row: usize, col: usize, u: f64, v: f64) {
        let off = (row * self.width + col) * 2;
        self.data[off] = u;
        self.data[off + 1] = v;
    }

    /// (h, w, 2) tensor view of the field.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 2], self.data.clone())
            .expect("field dimensions are consistent")
    }
}

// ── .flo interchange ─────────────────────────────────────────────────

const FLO_MAGIC: f32 = 202021.25;
// Guards against allocating for corrupt headers.
const MAX_FLO_PIXELS: usize = 1 << 28;

pub fn write_flo(field: &FlowField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + field.data.len() * 4);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(field.width as i32).to_le_bytes());
    buf.extend_from_slice(&(field.height as i32).to_le_bytes());
    for &v in &field.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |offset: usize, detail: String| FlowError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 12 {
        return Err(fail(0, format!("header needs 12 bytes, file has {}", bytes.len())));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(fail(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || (width as usize) * (height as usize) > MAX_FLO_PIXELS {
        return Err(fail(4, format!("implausible dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let numel = height * width * 2;
    if bytes.len() != 12 + numel * 4 {
        return Err(fail(
            12,
            format!(
                "payload has {} bytes, expected {} for {width}x{height}",
                bytes.len() - 12,
                numel * 4
            ),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for k in 0..numel {
        let off = 12 + 4 * k;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(off, format!("non-finite flow value {v}")));
        }
        data.push(v as f64);
    }
    FlowField::new(height, width, data)
}

// ── Pose files ───────────────────────────────────────────────────────

/// Parses a pose-per-line trajectory file: 12 whitespace-separated decimals,
/// the row-major top three rows of the 4×4 transform. Rotations within 1e-6
/// of orthonormal are repaired; anything further off is rejected.
pub fn parse_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |detail: String| FlowError::PoseParse {
            path: path.to_path_buf(),
            line: idx + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(fail(format!("expected 12 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 12];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|e| fail(format!("field {}: {e}", k + 1)))?;
        }
        let rotation = [
            [vals[0], vals[1], vals[2]],
            [vals[4], vals[5], vals[6]],
            [vals[8], vals[9], vals[10]],
        ];
        let translation = [vals[3], vals[7], vals[11]];
        let pose = Pose::from_parts_tol(rotation, translation, 1e-6)
            .map_err(|e| fail(e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

// ── Resizing ─────────────────────────────────────────────────────────

/// Bilinear resize with vector rescaling: flow components are displacement
/// vectors, so u scales by the width ratio and v by the height ratio.
pub fn resize_flow(field: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if new_h == 0 || new_w == 0 {
        return Err(FlowError::Contract("resize target must be positive".to_string()));
    }
    let (h, w) = (field.height, field.width);
    if (new_h, new_w) == (h, w) {
        return Ok(field.clone());
    }
    let scale_u = new_w as f64 / w as f64;
    let scale_v = new_h as f64 / h as f64;
    let mut out = FlowField::zeros(new_h, new_w);
    for r in 0..new_h {
        let sy = ((r as f64 + 0.5) / scale_v - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for c in 0..new_w {
            let sx = ((c as f64 + 0.5) / scale_u - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let sample = |chan: usize| {
                let at = |row: usize, col: usize| field.data[(row * w + col) * 2 + chan];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                top * (1.0 - fy) + bot * fy
            };
            out.set(r, c, sample(0) * scale_u, sample(1) * scale_v);
        }
    }
    Ok(out)
}

// ── Encoding ─────────────────────────────────────────────────────────

/// Affine map from signed flow to [0, 1]: e = clamp((u + F)/(2F), 0, 1).
/// The round trip is exact for f32-sourced components with |u| <= F (the
/// .flo payload grid), which is what the datasets store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowEncoding {
    pub bound: f64,
}

impl Default for FlowEncoding {
    fn default() -> Self {
        FlowEncoding { bound: 64.0 }
    }
}

/// Encoded field plus the fraction of saturated (clamped) components.
#[derive(Clone, Debug)]
pub struct EncodedFlow {
    pub field: FlowField,
    pub saturated_fraction: f64,
}

pub fn encode_flow(field: &FlowField, enc: &FlowEncoding) -> EncodedFlow {
    let f = enc.bound;
    let mut data = Vec::with_capacity(field.data.len());
    let mut saturated = 0usize;
    for &u in &field.data {
        let e = (u + f) / (2.0 * f);
        if !(0.0..=1.0).contains(&e) {
            saturated += 1;
        }
        data.push(e.clamp(0.0, 1.0));
    }
    EncodedFlow {
        field: FlowField {
            height: field.height,
            width: field.width,
            data,
        },
        saturated_fraction: saturated as f64 / field.data.len() as f64,
    }
}

pub fn decode_flow(field: &FlowField, enc: &FlowEncoding) -> FlowField {
    let f = enc.bound;
    FlowField {
        height: field.height,
        width: field.width,
        data: field.data.iter().map(|&e| e * (2.0 * f) - f).collect(),
    }
}

/// Reads a flow file, optionally resizes it, and encodes it into a
/// (h, w, 2) tensor in [0, 1]. Returns the tensor and the saturated
/// fraction.
pub fn load_encoded(
    path: &Path,
    resize: Option<(usize, usize)>,
    enc: &FlowEncoding,
) -> Result<(Tensor, f64)> {
    let mut field = read_flo(path)?;
    if let Some((h, w)) = resize {
        field = resize_flow(&field, h, w)?;
    }
    let encoded = encode_flow(&field, enc);
    Ok((encoded.field.to_tensor(), encoded.saturated_fraction))
}

// ── Gaussian blur ────────────────────────────────────────────────────

/// Sampled Gaussian with σ = radius/2 and half-width = radius, normalized
/// to sum 1.
pub fn gaussian_kernel(radius: usize) -> Vec<f64> {
    assert!(radius > 0, "blur radius must be positive");
    let sigma = radius as f64 / 2.0;
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

fn reflect(idx: isize, n: usize) -> usize {
    // Edge-inclusive mirror: -1 -> 0, -2 -> 1, n -> n-1.
    let n = n as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur applied directly to the two flow channels. This
/// is the fallback when only precomputed flow is available; blurring source
/// imagery before flow extraction is a pipeline stage outside this crate.
pub fn gaussian_blur_flow(field: &FlowField, radius: usize) -> FlowField {
    let kernel = gaussian_kernel(radius);
    let r = radius as isize;
    let (h, w) = (field.height, field.width);
    // Horizontal pass.
    let mut tmp = vec![0.0; field.data.len()];
    for row in 0..h {
        for col in 0..w {
            for chan in 0..2 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let src = reflect(col as isize + ki as isize - r, w);
                    acc += kv * field.data[(row * w + src) * 2 + chan];
                }
                tmp[(row * w + col) * 2 + chan] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; field.data.len()];
    for row in 0..h {
        for col in 0..w {
            for chan in 0..2 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let src = reflect(row as isize + ki as isize - r, h);
                    acc += kv * tmp[(src * w + col) * 2 + chan];
                }
                out[(row * w + col) * 2 + chan] = acc;
            }
        }
    }
    FlowField {
        height: h,
        width: w,
        data: out,
    }
}

// ── Manifests ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub flow_path: PathBuf,
    pub label: MotionVector,
}

/// Ordered frame-pair records for one (possibly sub-sampled) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub subsample: usize,
    pub frame_rate: f64,
    pub entries: Vec<ManifestEntry>,
}

impl SequenceManifest {
    /// Non-overlapping chain sub-manifest (pairs 0, s, 2s, ...) whose labels
    /// compose into a trajectory.
    pub fn chain(&self) -> SequenceManifest {
        SequenceManifest {
            sequence_id: self.sequence_id.clone(),
            subsample: self.subsample,
            frame_rate: self.frame_rate,
            entries: self
                .entries
                .iter()
                .step_by(self.subsample.max(1))
                .cloned()
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<MotionVector> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Frame rate of the virtual (sub-sampled) sequence.
    pub fn effective_frame_rate(&self) -> f64 {
        self.frame_rate / self.subsample.max(1) as f64
    }
}

/// Builds the virtual sub-sampled manifest: one record per pair (i, i+s)
/// for every valid i, labelled with the composed ground-truth relative pose.
/// Flow files are expected at `flow_dir/{frame_i}_{frame_j}.flo`.
pub fn make_subsampled_manifest(
    frame_ids: &[String],
    poses: &[Pose],
    s: usize,
    flow_dir: &Path,
    sequence_id: &str,
    frame_rate: f64,
) -> Result<SequenceManifest> {
    if s == 0 {
        return Err(FlowError::Contract("sub-sample factor must be >= 1".to_string()));
    }
    if frame_ids.len() != poses.len() {
        return Err(FlowError::Contract(format!(
            "{} frames vs {} poses",
            frame_ids.len(),
            poses.len()
        )));
    }
    if s >= frame_ids.len() {
        return Err(FlowError::Contract(format!(
            "sub-sample factor {s} >= frame count {}",
            frame_ids.len()
        )));
    }
    let mut entries = Vec::with_capacity(frame_ids.len() - s);
    for i in 0..frame_ids.len() - s {
        let label = geometry::from_se3(&geometry::relative_pose(&poses[i], &poses[i + s]))?;
        entries.push(ManifestEntry {
            flow_path: flow_dir.join(format!("{}_{}.flo", frame_ids[i], frame_ids[i + s])),
            label,
        });
    }
    Ok(SequenceManifest {
        sequence_id: sequence_id.to_string(),
        subsample: s,
        frame_rate,
        entries,
    })
}

/// Line-oriented manifest: optional `# key value` headers, then
/// `flow_path τx τy τz θx θy θz` records. Paths must not contain spaces.
pub fn write_manifest(manifest: &SequenceManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# sequence {}\n", manifest.sequence_id));
    out.push_str(&format!("# subsample {}\n", manifest.subsample));
    out.push_str(&format!("# frame_rate {:.17e}\n", manifest.frame_rate));
    for e in &manifest.entries {
        let p = e.flow_path.to_string_lossy();
        if p.contains(char::is_whitespace) {
            return Err(FlowError::Contract(format!(
                "flow path '{p}' contains whitespace; manifest records are space-separated"
            )));
        }
        let a = e.label.to_array();
        out.push_str(&format!(
            "{p} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
            a[0], a[1], a[2], a[3], a[4], a[5]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut manifest = SequenceManifest {
        sequence_id: String::new(),
        subsample: 1,
        frame_rate: 10.0,
        entries: Vec::new(),
    };
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |detail: String| FlowError::PoseParse {
            path: path.to_path_buf(),
            line: idx + 1,
            detail,
        };
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("sequence"), Some(v)) => manifest.sequence_id = v.to_string(),
                (Some("subsample"), Some(v)) => {
                    manifest.subsample = v.parse().map_err(|e| fail(format!("subsample: {e}")))?
                }
                (Some("frame_rate"), Some(v)) => {
                    manifest.frame_rate = v.parse().map_err(|e| fail(format!("frame_rate: {e}")))?
                }
                _ => {} // unknown comments are ignored
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(fail(format!("expected 7 fields, got {}", fields.len())));
        }
        let mut nums = [0.0f64; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f
                .parse()
                .map_err(|e| fail(format!("field {}: {e}", k + 2)))?;
        }
        manifest.entries.push(ManifestEntry {
            flow_path: PathBuf::from(fields[0]),
            label: MotionVector::from_array(nums),
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_field(h: usize, w: usize, bound: f64, rng: &mut Rng) -> FlowField {
        // Values on the f32 grid, as .flo files store them.
        let data: Vec<f64> = (0..h * w * 2)
            .map(|_| (rng.range(-bound, bound) as f32) as f64)
            .collect();
        FlowField::new(h, w, data).unwrap()
    }

    #[test]
    fn flo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut rng = Rng::seed_from(1);
        let field = random_field(4, 6, 30.0, &mut rng);
        write_flo(&field, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(field, back);

        let zero = FlowField::zeros(3, 5);
        write_flo(&zero, &path).unwrap();
        assert_eq!(read_flo(&path).unwrap(), zero);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        std::fs::write(&path, &bytes).unwrap();
        match read_flo(&path) {
            Err(FlowError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let field = FlowField::zeros(2, 2);
        write_flo(&field, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_flo(&path) {
            Err(FlowError::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pose_file_parses_identity_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let poses = parse_poses(&path).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0], Pose::identity());

        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        match parse_poses(&path) {
            Err(FlowError::PoseParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 x\n").unwrap();
        assert!(parse_poses(&path).is_err());

        // Non-orthonormal beyond 1e-6 is rejected.
        std::fs::write(&path, "1.01 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(parse_poses(&path).is_err());
    }

    #[test]
    fn pose_count_matches_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let mut text = String::new();
        let motions = vec![MotionVector::new([0.0, 0.0, 1.0], [0.0, 0.01, 0.0]); 49];
        let traj = geometry::compose_trajectory(&motions, &Pose::identity()).unwrap();
        for p in &traj {
            let m = p.matrix();
            let row: Vec<String> = (0..3)
                .flat_map(|i| (0..4).map(move |j| format!("{:.17e}", m[i][j])))
                .collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        assert_eq!(parse_poses(&path).unwrap().len(), traj.len());
    }

    #[test]
    fn resize_identity_and_constant_scaling() {
        let mut rng = Rng::seed_from(2);
        let field = random_field(8, 12, 10.0, &mut rng);
        assert_eq!(resize_flow(&field, 8, 12).unwrap(), field);

        let mut constant = FlowField::zeros(10, 20);
        for r in 0..10 {
            for c in 0..20 {
                constant.set(r, c, 4.0, 2.0);
            }
        }
        let half = resize_flow(&constant, 5, 10).unwrap();
        for r in 0..5 {
            for c in 0..10 {
                let (u, v) = half.get(r, c);
                assert!((u - 2.0).abs() < 1e-12);
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_to_network_input_shape() {
        let field = FlowField::zeros(350, 1240);
        let resized = resize_flow(&field, 94, 300).unwrap();
        assert_eq!((resized.height(), resized.width()), (94, 300));
    }

    #[test]
    fn encoding_spot_values_and_round_trip() {
        let enc = FlowEncoding::default();
        let mut field = FlowField::zeros(1, 3);
        field.set(0, 0, 0.0, 64.0);
        field.set(0, 1, -64.0, 10.0);
        let e = encode_flow(&field, &enc);
        assert_eq!(e.field.get(0, 0), (0.5, 1.0));
        assert_eq!(e.field.get(0, 1), (0.0, (10.0 + 64.0) / 128.0));
        assert_eq!(e.saturated_fraction, 0.0);

        let mut rng = Rng::seed_from(9);
        let field = random_field(6, 7, 63.9, &mut rng);
        let enc_field = encode_flow(&field, &enc);
        let back = decode_flow(&enc_field.field, &enc);
        assert_eq!(back, field, "round trip must be exact for f32-grid flows");
    }

    #[test]
    fn encoding_reports_saturation() {
        let enc = FlowEncoding { bound: 1.0 };
        let mut field = FlowField::zeros(1, 2);
        field.set(0, 0, 5.0, 0.0);
        let e = encode_flow(&field, &enc);
        assert_eq!(e.saturated_fraction, 0.25);
        assert_eq!(e.field.get(0, 0).0, 1.0);
    }

    #[test]
    fn blur_kernel_normalized_and_constant_invariant() {
        let k = gaussian_kernel(10);
        assert_eq!(k.len(), 21);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut constant = FlowField::zeros(9, 9);
        for r in 0..9 {
            for c in 0..9 {
                constant.set(r, c, 3.0, -1.5);
            }
        }
        let blurred = gaussian_blur_flow(&constant, 3);
        for r in 0..9 {
            for c in 0..9 {
                let (u, v) = blurred.get(r, c);
                assert!((u - 3.0).abs() < 1e-12);
                assert!((v + 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_impulse_reproduces_kernel_mass() {
        let mut field = FlowField::zeros(41, 41);
        field.set(20, 20, 1.0, 0.0);
        let blurred = gaussian_blur_flow(&field, 10);
        let total: f64 = (0..41)
            .flat_map(|r| (0..41).map(move |c| (r, c)))
            .map(|(r, c)| blurred.get(r, c).0)
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
    }

    fn synthetic_trajectory(n: usize) -> Vec<Pose> {
        let motions =
            vec![MotionVector::new([0.02, -0.01, 1.0], [0.001, 0.02, -0.002]); n - 1];
        geometry::compose_trajectory(&motions, &Pose::identity()).unwrap()
    }

    #[test]
    fn manifest_pair_counts_and_labels() {
        let poses = synthetic_trajectory(5);
        let ids: Vec<String> = (0..5).map(|i| format!("{i:06}")).collect();
        let dir = PathBuf::from("flows");
        let m1 = make_subsampled_manifest(&ids, &poses, 1, &dir, "seq", 10.0).unwrap();
        assert_eq!(m1.entries.len(), 4);
        let m2 = make_subsampled_manifest(&ids, &poses, 2, &dir, "seq", 10.0).unwrap();
        assert_eq!(m2.entries.len(), 3);

        // s=2 labels equal the composition of two s=1 labels.
        let a = crate::geometry::to_se3(&m1.entries[0].label).unwrap();
        let b = crate::geometry::to_se3(&m1.entries[1].label).unwrap();
        let ab = a.compose(&b);
        let direct = crate::geometry::to_se3(&m2.entries[0].label).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((ab.matrix()[i][j] - direct.matrix()[i][j]).abs() < 1e-12);
            }
        }
        assert!(make_subsampled_manifest(&ids, &poses, 5, &dir, "seq", 10.0).is_err());
        assert!(make_subsampled_manifest(&ids, &poses, 0, &dir, "seq", 10.0).is_err());
    }

    #[test]
    fn constant_velocity_labels_scale_with_subsample() {
        let poses = synthetic_trajectory(10);
        let ids: Vec<String> = (0..10).map(|i| format!("{i:06}")).collect();
        let dir = PathBuf::from("flows");
        let m1 = make_subsampled_manifest(&ids, &poses, 1, &dir, "seq", 10.0).unwrap();
        let m3 = make_subsampled_manifest(&ids, &poses, 3, &dir, "seq", 10.0).unwrap();
        // Pure translation component scales ~3x for near-straight motion.
        let t1 = m1.entries[0].label.translation[2];
        let t3 = m3.entries[0].label.translation[2];
        assert!((t3 / t1 - 3.0).abs() < 0.01, "ratio {}", t3 / t1);
    }

    #[test]
    fn chain_composition_matches_endpoint() {
        let poses = synthetic_trajectory(21);
        let ids: Vec<String> = (0..21).map(|i| format!("{i:06}")).collect();
        let dir = PathBuf::from("flows");
        let m1 = make_subsampled_manifest(&ids, &poses, 1, &dir, "seq", 10.0).unwrap();
        let m2 = make_subsampled_manifest(&ids, &poses, 2, &dir, "seq", 10.0).unwrap();
        let end1 = geometry::compose_trajectory(&m1.labels(), &Pose::identity()).unwrap();
        let chain = m2.chain();
        let end2 = geometry::compose_trajectory(&chain.labels(), &Pose::identity()).unwrap();
        // d1 composed over 20 steps == d2 chain composed over 10 steps.
        let a = end1.last().unwrap();
        let b = end2.last().unwrap();
        let d = a.inverse().compose(b);
        assert!(d.translation_norm() < 1e-8, "gap {}", d.translation_norm());
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.manifest");
        let poses = synthetic_trajectory(4);
        let ids: Vec<String> = (0..4).map(|i| format!("{i:06}")).collect();
        let m = make_subsampled_manifest(&ids, &poses, 1, &PathBuf::from("d"), "seq07", 10.0)
            .unwrap();
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    proptest::proptest! {
        // Encoding is lossless on the f32 grid within the bound, for any
        // bound that is a power of two.
        #[test]
        fn encode_round_trips_on_the_f32_grid(
            raw in proptest::collection::vec(-63.99f32..63.99f32, 24),
        ) {
            let enc = FlowEncoding::default();
            let data: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let field = FlowField::new(3, 4, data).unwrap();
            let back = decode_flow(&encode_flow(&field, &enc).field, &enc);
            proptest::prop_assert_eq!(back, field);
        }

        // Resizing a constant field scales the components by the size
        // ratios and nothing else.
        #[test]
        fn resize_scales_constant_fields(
            u in -20.0f64..20.0,
            v in -20.0f64..20.0,
        ) {
            let mut field = FlowField::zeros(6, 10);
            for r in 0..6 {
                for c in 0..10 {
                    field.set(r, c, u, v);
                }
            }
            let out = resize_flow(&field, 3, 5).unwrap();
            for r in 0..3 {
                for c in 0..5 {
                    let (ou, ov) = out.get(r, c);
                    proptest::prop_assert!((ou - u * 0.5).abs() < 1e-12);
                    proptest::prop_assert!((ov - v * 0.5).abs() < 1e-12);
                }
            }
        }
    }
}
