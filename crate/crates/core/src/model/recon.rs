use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use super::text::{lines, Line};
use super::{validate_name, FormatError, ImageId, ModelError, PointId, SceneId};

const HEADER: &str = "# pairforge reconstruction v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub id: SceneId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: ImageId,
    pub scene: SceneId,
    pub name: String,
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageRecord {
    /// Planar image area in pixels².
    pub fn area(&self) -> f64 {
        f64::from(self.width_px) * f64::from(self.height_px)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= f64::from(self.width_px) && y <= f64::from(self.height_px)
    }
}

/// One element of a point track: the observing image and its keypoint index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub image: ImageId,
    pub keypoint: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: PointId,
    pub position: [f64; 3],
    pub track: Vec<Observation>,
}

/// Scenes, registered images and triangulated points with their tracks.
///
/// Construction validates every invariant; the value is immutable afterwards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reconstruction {
    scenes: Vec<Scene>,
    images: Vec<ImageRecord>,
    points: Vec<Point3D>,
    image_index: HashMap<ImageId, usize>,
}

impl Reconstruction {
    pub fn new(
        scenes: Vec<Scene>,
        images: Vec<ImageRecord>,
        points: Vec<Point3D>,
    ) -> Result<Self, ModelError> {
        let mut scene_ids = HashSet::new();
        for scene in &scenes {
            validate_name(&scene.name)?;
            if !scene_ids.insert(scene.id) {
                return Err(ModelError::DuplicateScene(scene.id));
            }
        }
        let mut image_index = HashMap::with_capacity(images.len());
        let mut names = HashSet::new();
        for (idx, image) in images.iter().enumerate() {
            validate_image(image, &scene_ids)?;
            if image_index.insert(image.id, idx).is_some() {
                return Err(ModelError::DuplicateImage(image.id));
            }
            if !names.insert(image.name.as_str()) {
                return Err(ModelError::DuplicateName(image.name.clone()));
            }
        }
        let mut point_ids = HashSet::with_capacity(points.len());
        for point in &points {
            if !point_ids.insert(point.id) {
                return Err(ModelError::DuplicatePoint(point.id));
            }
            validate_point(point, |id| image_index.contains_key(&id))?;
        }
        Ok(Self {
            scenes,
            images,
            points,
            image_index,
        })
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn points(&self) -> &[Point3D] {
        &self.points
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn scene_of(&self, id: ImageId) -> Option<SceneId> {
        self.image(id).map(|img| img.scene)
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.name == name)
    }

    /// Map from image id to scene id, for consumers that only need membership.
    pub fn scene_map(&self) -> HashMap<ImageId, SceneId> {
        self.images.iter().map(|img| (img.id, img.scene)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty() && self.images.is_empty() && self.points.is_empty()
    }
}

fn validate_image(image: &ImageRecord, scenes: &HashSet<SceneId>) -> Result<(), ModelError> {
    validate_name(&image.name)?;
    if image.width_px == 0 || image.height_px == 0 {
        return Err(ModelError::EmptyImage(image.id));
    }
    if !scenes.contains(&image.scene) {
        return Err(ModelError::UnknownScene {
            image: image.id,
            scene: image.scene,
        });
    }
    Ok(())
}

fn validate_point(point: &Point3D, known: impl Fn(ImageId) -> bool) -> Result<(), ModelError> {
    if point.position.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(format!("point {}", point.id)));
    }
    if point.track.len() < 2 {
        return Err(ModelError::ShortTrack {
            point: point.id,
            len: point.track.len(),
        });
    }
    let mut seen = HashSet::with_capacity(point.track.len());
    for obs in &point.track {
        if !known(obs.image) {
            return Err(ModelError::DanglingImage {
                point: point.id,
                image: obs.image,
            });
        }
        if !seen.insert(obs.image) {
            return Err(ModelError::RepeatedObservation {
                point: point.id,
                image: obs.image,
            });
        }
    }
    Ok(())
}

/// Parses the reconstruction text format.
///
/// Records may appear in any order; references are resolved after the whole
/// input is read and the first violation is reported with its location.
pub fn parse_reconstruction(input: &str) -> Result<Reconstruction, FormatError> {
    let mut scenes = Vec::new();
    let mut images = Vec::new();
    let mut points = Vec::new();
    // (line, column of each track token) kept for deferred reference checks.
    let mut image_lines = Vec::new();
    let mut point_lines: Vec<(usize, Vec<usize>)> = Vec::new();

    let mut scene_ids = HashMap::new();
    let mut image_ids = HashMap::new();
    let mut image_names = HashMap::new();
    let mut point_ids = HashSet::new();

    for line in lines(input) {
        let keyword = line.tokens[0];
        match keyword.text {
            "SCENE" => {
                line.expect_len(3)?;
                let id = SceneId(line.field(1, "scene_id")?);
                let name = line.tokens[2].text.to_string();
                if scene_ids.insert(id, line.number).is_some() {
                    return Err(line.invalid(ModelError::DuplicateScene(id)));
                }
                scenes.push(Scene { id, name });
            }
            "IMAGE" => {
                line.expect_len(6)?;
                let id = ImageId(line.field(1, "image_id")?);
                let scene = SceneId(line.field(2, "scene_id")?);
                let name = line.tokens[3].text.to_string();
                let width_px: u32 = line.field(4, "width_px")?;
                let height_px: u32 = line.field(5, "height_px")?;
                if width_px == 0 {
                    return Err(line.error(line.tokens[4].column, "width_px must be positive"));
                }
                if height_px == 0 {
                    return Err(line.error(line.tokens[5].column, "height_px must be positive"));
                }
                if image_ids.insert(id, line.number).is_some() {
                    return Err(line.invalid(ModelError::DuplicateImage(id)));
                }
                if image_names.insert(name.clone(), id).is_some() {
                    return Err(line.invalid(ModelError::DuplicateName(name)));
                }
                image_lines.push((line.number, line.tokens[2].column));
                images.push(ImageRecord {
                    id,
                    scene,
                    name,
                    width_px,
                    height_px,
                });
            }
            "POINT3D" => {
                let point = parse_point(&line)?;
                if !point_ids.insert(point.id) {
                    return Err(line.invalid(ModelError::DuplicatePoint(point.id)));
                }
                let cols = line.tokens[6..].iter().map(|t| t.column).collect();
                point_lines.push((line.number, cols));
                points.push(point);
            }
            other => {
                return Err(line.error(keyword.column, format!("unknown record {other:?}")));
            }
        }
    }

    for (image, &(line, column)) in images.iter().zip(&image_lines) {
        if !scene_ids.contains_key(&image.scene) {
            return Err(FormatError::Syntax {
                line,
                column,
                message: format!("image {} references unknown scene {}", image.id, image.scene),
            });
        }
    }
    for (point, (line, columns)) in points.iter().zip(&point_lines) {
        for (obs, &column) in point.track.iter().zip(columns) {
            if !image_ids.contains_key(&obs.image) {
                return Err(FormatError::Syntax {
                    line: *line,
                    column,
                    message: ModelError::DanglingImage {
                        point: point.id,
                        image: obs.image,
                    }
                    .to_string(),
                });
            }
        }
    }

    Reconstruction::new(scenes, images, points).map_err(FormatError::from)
}

fn parse_point(line: &Line<'_>) -> Result<Point3D, FormatError> {
    let id = PointId(line.field(1, "point_id")?);
    let position = [
        line.finite(2, "x")?,
        line.finite(3, "y")?,
        line.finite(4, "z")?,
    ];
    let marker = line.token(5, "TRACK")?;
    if marker.text != "TRACK" {
        return Err(line.error(marker.column, format!("expected TRACK, found {:?}", marker.text)));
    }
    let mut track = Vec::with_capacity(line.tokens.len().saturating_sub(6));
    let mut seen = HashSet::new();
    for tok in &line.tokens[6..] {
        let (img, kp) = tok
            .text
            .split_once(':')
            .ok_or_else(|| line.error(tok.column, format!("expected <image_id>:<kp_idx>, found {:?}", tok.text)))?;
        let image = ImageId(img.parse().map_err(|_| line.error(tok.column, format!("invalid image id {img:?}")))?);
        let keypoint: u32 = kp
            .parse()
            .map_err(|_| line.error(tok.column, format!("invalid keypoint index {kp:?}")))?;
        if !seen.insert(image) {
            return Err(line.invalid(ModelError::RepeatedObservation { point: id, image }));
        }
        track.push(Observation { image, keypoint });
    }
    if track.len() < 2 {
        return Err(line.invalid(ModelError::ShortTrack {
            point: id,
            len: track.len(),
        }));
    }
    Ok(Point3D {
        id,
        position,
        track,
    })
}

/// Writes the reconstruction text format. Output is a pure function of `r`.
pub fn write_reconstruction(r: &Reconstruction) -> String {
    let mut out = String::with_capacity(64 + 48 * r.images.len() + 64 * r.points.len());
    out.push_str(HEADER);
    out.push('\n');
    for scene in &r.scenes {
        let _ = writeln!(out, "SCENE {} {}", scene.id, scene.name);
    }
    for img in &r.images {
        let _ = writeln!(
            out,
            "IMAGE {} {} {} {} {}",
            img.id, img.scene, img.name, img.width_px, img.height_px
        );
    }
    for p in &r.points {
        let [x, y, z] = p.position;
        let _ = write!(out, "POINT3D {} {x:?} {y:?} {z:?} TRACK", p.id);
        for obs in &p.track {
            let _ = write!(out, " {}:{}", obs.image, obs.keypoint);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
SCENE 0 campus
IMAGE 1 0 a.jpg 640 480
IMAGE 2 0 b.jpg 640 480
POINT3D 10 0.5 -1.25 3 TRACK 1:0 2:7
";

    #[test]
    fn minimal_file_parses() {
        let r = parse_reconstruction(MINIMAL).unwrap();
        assert_eq!(r.images().len(), 2);
        assert_eq!(r.points().len(), 1);
        assert_eq!(r.points()[0].track.len(), 2);
        assert_eq!(r.points()[0].track[1].keypoint, 7);
        assert_eq!(r.scene_of(ImageId(2)), Some(SceneId(0)));
    }

    #[test]
    fn dangling_track_image_is_named() {
        let src = "SCENE 0 s\nIMAGE 1 0 a 10 10\nPOINT3D 1 0 0 0 TRACK 1:0 9:3\n";
        let err = parse_reconstruction(src).unwrap_err();
        assert_eq!(err.line(), Some(3));
        match &err {
            FormatError::Syntax { column, message, .. } => {
                assert_eq!(*column, 27);
                assert!(message.contains("unknown image 9"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected_with_location() {
        let src = "SCENE 0 s\nIMAGE 1 0 a 10 10\nIMAGE 1 0 b 10 10\n";
        let err = parse_reconstruction(src).unwrap_err();
        assert_eq!(err.line(), Some(3));
        assert!(err.to_string().contains("duplicate image id 1"));

        let src = "SCENE 0 s\nSCENE 0 t\n";
        assert_eq!(parse_reconstruction(src).unwrap_err().line(), Some(2));

        let src = "SCENE 0 s\nIMAGE 1 0 a 10 10\nIMAGE 2 0 b 10 10\n\
                   POINT3D 4 0 0 0 TRACK 1:0 2:0\nPOINT3D 4 0 0 0 TRACK 1:1 2:1\n";
        assert_eq!(parse_reconstruction(src).unwrap_err().line(), Some(5));
    }

    #[test]
    fn malformed_lines_report_column() {
        let err = parse_reconstruction("SCENE 0 s\nIMAGE 1 0 a ten 10\n").unwrap_err();
        assert_eq!(
            err,
            FormatError::Syntax {
                line: 2,
                column: 13,
                message: "invalid <width_px> \"ten\"".into()
            }
        );
        let err = parse_reconstruction("CAMERA 1\n").unwrap_err();
        assert_eq!(err.line(), Some(1));
        let err = parse_reconstruction("SCENE 0 s\nIMAGE 1 0 a 1 1\nIMAGE 2 0 b 1 1\nPOINT3D 1 0 0 0 TRACK 1:0\n")
            .unwrap_err();
        assert!(err.to_string().contains("at least 2"));
        let err = parse_reconstruction("SCENE 0 s\nIMAGE 1 0 a 1 1\nIMAGE 2 0 b 1 1\nPOINT3D 1 0 0 0 TRACK 1:0 1:2\n")
            .unwrap_err();
        assert!(err.to_string().contains("more than once"));
        let err = parse_reconstruction("SCENE 0 s\nIMAGE 1 3 a 1 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown scene 3"));
        let err = parse_reconstruction("SCENE 0 s\nIMAGE 1 0 a 0 1\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn empty_reconstruction_writes_header_only() {
        let r = Reconstruction::default();
        let text = write_reconstruction(&r);
        assert_eq!(text, format!("{HEADER}\n"));
        assert_eq!(parse_reconstruction(&text).unwrap(), r);
    }

    #[test]
    fn single_image_writes_one_scene_and_one_image_line() {
        let r = Reconstruction::new(
            vec![Scene { id: SceneId(3), name: "s".into() }],
            vec![ImageRecord {
                id: ImageId(0),
                scene: SceneId(3),
                name: "img".into(),
                width_px: 4,
                height_px: 2,
            }],
            vec![],
        )
        .unwrap();
        let text = write_reconstruction(&r);
        let records: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(records, vec!["SCENE 3 s", "IMAGE 0 3 img 4 2"]);
    }

    #[test]
    fn round_trip_preserves_exact_coordinates() {
        let r = parse_reconstruction(MINIMAL).unwrap();
        let mut points = r.points().to_vec();
        points[0].position = [0.1 + 0.2, -1e-300, 123456.789012345];
        let r = Reconstruction::new(r.scenes().to_vec(), r.images().to_vec(), points).unwrap();
        let text = write_reconstruction(&r);
        assert_eq!(parse_reconstruction(&text).unwrap(), r);
    }
}
