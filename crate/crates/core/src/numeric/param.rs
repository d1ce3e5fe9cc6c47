use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// A named block with its own storage, the unflattened view of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat parameter storage plus the layout that names its blocks.
///
/// Blocks are contiguous, non-overlapping and cover the whole vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerDesc>,
}

impl ParamVector {
    /// Zero-filled vector for a `(name, shape)` list; offsets are assigned in order.
    pub fn zeros(blocks: &[(String, Vec<usize>)]) -> Self {
        let mut layout = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (name, shape) in blocks {
            let desc = LayerDesc {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += desc.len();
            layout.push(desc);
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    /// Validates the layout against the value array.
    pub fn from_parts(values: Vec<f64>, layout: Vec<LayerDesc>) -> Result<Self> {
        let mut expected = 0;
        for d in &layout {
            if d.offset != expected {
                return Err(Error::Decode(format!(
                    "layer {} starts at {} but previous block ends at {}",
                    d.name, d.offset, expected
                )));
            }
            expected = d
                .shape
                .iter()
                .try_fold(1usize, |a, &s| a.checked_mul(s))
                .and_then(|len| d.offset.checked_add(len))
                .ok_or_else(|| Error::Decode(format!("layer {} has an invalid shape", d.name)))?;
        }
        if expected != values.len() {
            return Err(Error::Dimension {
                layer: "parameter vector".into(),
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter vector".into(),
                index: i,
            });
        }
        Ok(Self { values, layout })
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(tensors.len());
        for t in tensors {
            let len: usize = t.shape.iter().product();
            if len != t.values.len() {
                return Err(Error::Dimension {
                    layer: t.name,
                    expected: len,
                    got: t.values.len(),
                });
            }
            layout.push(LayerDesc {
                name: t.name,
                shape: t.shape,
                offset: values.len(),
            });
            values.extend(t.values);
        }
        Self::from_parts(values, layout)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout
            .iter()
            .map(|d| Tensor {
                name: d.name.clone(),
                shape: d.shape.clone(),
                values: self.values[d.range()].to_vec(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerDesc] {
        &self.layout
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDesc> {
        self.layout.iter().find(|d| d.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layer(name).map(|d| &self.values[d.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layer(name)?.range();
        Some(&mut self.values[r])
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Hash of the exact bit pattern of the values; used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamVector {
        let mut p = ParamVector::zeros(&[("a".into(), vec![2, 3]), ("b".into(), vec![3])]);
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        p
    }

    #[test]
    fn offsets_are_contiguous() {
        let p = sample();
        assert_eq!(p.layer("a").unwrap().offset, 0);
        assert_eq!(p.layer("b").unwrap().offset, 6);
        assert_eq!(p.len(), 9);
        assert_eq!(p.block("b").unwrap(), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let layout = vec![
            LayerDesc {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
            },
            LayerDesc {
                name: "b".into(),
                shape: vec![2],
                offset: 3,
            },
        ];
        assert!(ParamVector::from_parts(vec![0.0; 5], layout).is_err());
    }

    #[test]
    fn from_parts_rejects_non_finite() {
        let layout = vec![LayerDesc {
            name: "a".into(),
            shape: vec![2],
            offset: 0,
        }];
        assert!(matches!(
            ParamVector::from_parts(vec![0.0, f64::NAN], layout),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn fingerprint_changes_with_values() {
        let mut p = sample();
        let f = p.fingerprint();
        p.values_mut()[3] += 1e-12;
        assert_ne!(f, p.fingerprint());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..5),
            seed in any::<u64>(),
        ) {
            let blocks: Vec<(String, Vec<usize>)> = shapes
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("layer{i}"), s))
                .collect();
            let mut p = ParamVector::zeros(&blocks);
            let mut rng = crate::rng::RngState::new(seed);
            for v in p.values_mut() {
                *v = rng.standard_normal();
            }
            let back = ParamVector::from_tensors(p.tensors()).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(back.tensors(), p.tensors());
        }
    }
}
