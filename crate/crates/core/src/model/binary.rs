use super::{validate_name, FormatError, ModelError};

pub const FEATURE_MAP_MAGIC: [u8; 4] = *b"FMAP";
pub const DESCRIPTOR_MAGIC: [u8; 4] = *b"DVEC";
pub const FORMAT_VERSION: u32 = 1;

/// Magic plus three or four little-endian `u32` fields.
const FMAP_HEADER_LEN: usize = 4 + 4 * 4;
const DVEC_HEADER_LEN: usize = 4 + 3 * 4;

/// A dense `D x H x W` activation grid stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(ModelError::FeatureMapShape {
                channels,
                height,
                width,
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial locations `H * W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// The `H * W` activations of channel `c`, row-major.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    /// The `D`-dimensional local feature at pixel index `i = y * W + x`.
    pub fn local_feature(&self, i: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.channels).map(|c| self.values[c * n + i]).collect()
    }
}

/// Ordered named global vectors of one common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self, ModelError> {
        let mut set = Self::new(dim)?;
        for (name, v) in entries {
            set.push(name, v)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: String, vector: Vec<f64>) -> Result<(), ModelError> {
        validate_name(&name)?;
        if vector.len() != self.dim {
            return Err(ModelError::DescriptorDim {
                name,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("descriptor {name:?}")));
        }
        self.entries.push((name, vector));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAP_HEADER_LEN + 4 * map.values.len());
    out.extend_from_slice(&FEATURE_MAP_MAGIC);
    for field in [FORMAT_VERSION, dim_u32(map.channels), dim_u32(map.height), dim_u32(map.width)] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    push_f32s(&mut out, &map.values);
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap, FormatError> {
    check_magic(bytes, FEATURE_MAP_MAGIC)?;
    let header = read_u32s::<4>(bytes, 4)?;
    if header[0] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(header[0]));
    }
    let [d, h, w] = [header[1], header[2], header[3]].map(|v| v as usize);
    let count = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| FormatError::DimensionMismatch(format!("{d}x{h}x{w} overflows")))?;
    let values = read_f32s(bytes, FMAP_HEADER_LEN, count, || format!("{d}x{h}x{w} feature map"))?;
    Ok(FeatureMap::new(d, h, w, values)?)
}

/// Encodes a bare `count x dim` matrix in the descriptor binary layout.
pub fn encode_matrix(count: usize, dim: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), count * dim, "matrix payload does not match its shape");
    let mut out = Vec::with_capacity(DVEC_HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&DESCRIPTOR_MAGIC);
    for field in [FORMAT_VERSION, dim_u32(count), dim_u32(dim)] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    push_f32s(&mut out, values);
    out
}

/// Decodes a descriptor-layout matrix into `(count, dim, values)`.
pub fn decode_matrix(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), FormatError> {
    check_magic(bytes, DESCRIPTOR_MAGIC)?;
    let header = read_u32s::<3>(bytes, 4)?;
    if header[0] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(header[0]));
    }
    let (count, dim) = (header[1] as usize, header[2] as usize);
    if dim == 0 {
        return Err(FormatError::DimensionMismatch("descriptor dimension is 0".into()));
    }
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| FormatError::DimensionMismatch(format!("{count}x{dim} overflows")))?;
    let values = read_f32s(bytes, DVEC_HEADER_LEN, total, || format!("{count}x{dim} matrix"))?;
    Ok((count, dim, values))
}

/// Encodes a descriptor set into the binary payload and its names sidecar.
pub fn encode_descriptors(set: &DescriptorSet) -> (Vec<u8>, String) {
    let flat: Vec<f64> = set.entries.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let bytes = encode_matrix(set.len(), set.dim, &flat);
    let mut names = String::new();
    for (name, _) in &set.entries {
        names.push_str(name);
        names.push('\n');
    }
    (bytes, names)
}

pub fn decode_descriptors(bytes: &[u8], names: &str) -> Result<DescriptorSet, FormatError> {
    let (count, dim, values) = decode_matrix(bytes)?;
    let names: Vec<&str> = names.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if names.len() != count {
        return Err(FormatError::DimensionMismatch(format!(
            "payload holds {count} descriptors but the sidecar names {}",
            names.len()
        )));
    }
    let mut set = DescriptorSet::new(dim)?;
    for (name, row) in names.into_iter().zip(values.chunks_exact(dim)) {
        set.push(name.to_string(), row.to_vec())?;
    }
    Ok(set)
}

fn dim_u32(v: usize) -> u32 {
    u32::try_from(v).expect("dimension exceeds u32 range")
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<(), FormatError> {
    let found = &bytes[..bytes.len().min(4)];
    if found != expected {
        return Err(FormatError::BadMagic {
            expected,
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn read_u32s<const N: usize>(bytes: &[u8], offset: usize) -> Result<[u32; N], FormatError> {
    let end = offset + 4 * N;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let mut out = [0u32; N];
    for (i, chunk) in bytes[offset..end].chunks_exact(4).enumerate() {
        out[i] = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    Ok(out)
}

fn read_f32s(
    bytes: &[u8],
    offset: usize,
    count: usize,
    what: impl Fn() -> String,
) -> Result<Vec<f64>, FormatError> {
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| FormatError::DimensionMismatch(what()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::DimensionMismatch(format!(
            "{} declares {expected} bytes but the file has {}",
            what(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes[offset..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        values.push(f64::from(v));
    }
    Ok(values)
}
