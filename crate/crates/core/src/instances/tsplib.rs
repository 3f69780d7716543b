//! TSPLIB95 reader for EUC_2D TSP and CVRP files.

use std::collections::HashMap;
use std::path::Path;

use super::{CvrpInstance, Instance, InstanceError, Point, Rounding, ScaledCoordinates, TspInstance, TspTour};

/// A parsed library instance: coordinates scaled into the unit square plus the
/// record needed to evaluate objectives in the file's own units.
#[derive(Clone, Debug, PartialEq)]
pub struct LibraryInstance {
    pub name: String,
    pub instance: Instance,
    pub scaling: ScaledCoordinates,
}

fn perr(line: usize, message: impl Into<String>) -> InstanceError {
    InstanceError::Parse { line, message: message.into() }
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum Section {
    Header,
    Coords,
    Demands,
    Depots,
    Done,
}

pub fn parse_library_file(path: impl AsRef<Path>) -> Result<LibraryInstance, InstanceError> {
    let text = std::fs::read_to_string(path)?;
    parse_library_str(&text)
}

pub fn parse_library_str(text: &str) -> Result<LibraryInstance, InstanceError> {
    let mut header: HashMap<String, (usize, String)> = HashMap::new();
    let mut coords: Vec<(usize, usize, Point)> = Vec::new();
    let mut demands: Vec<(usize, usize, u64)> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut section = Section::Header;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        match upper.as_str() {
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depots;
                continue;
            }
            "EOF" => {
                section = Section::Done;
                continue;
            }
            _ => {}
        }
        if upper.ends_with("_SECTION") {
            return Err(perr(line_no, format!("unsupported section {line}")));
        }
        if line.contains(':') && (section == Section::Header || !starts_numeric(line)) {
            let (k, v) = line.split_once(':').expect("checked");
            header.insert(k.trim().to_ascii_uppercase(), (line_no, v.trim().to_string()));
            section = Section::Header;
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Header => return Err(perr(line_no, format!("expected KEY : VALUE, got {line:?}"))),
            Section::Done => break,
            Section::Coords => {
                if tokens.len() < 3 {
                    return Err(perr(line_no, "coordinate line needs an id and two coordinates"));
                }
                let id = parse_num::<usize>(tokens[0], line_no, "node id")?;
                let x = parse_num::<f64>(tokens[1], line_no, "x coordinate")?;
                let y = parse_num::<f64>(tokens[2], line_no, "y coordinate")?;
                if !x.is_finite() || !y.is_finite() {
                    return Err(perr(line_no, "non-finite coordinate"));
                }
                coords.push((line_no, id, [x, y]));
            }
            Section::Demands => {
                if tokens.len() < 2 {
                    return Err(perr(line_no, "demand line needs an id and a demand"));
                }
                let id = parse_num::<usize>(tokens[0], line_no, "node id")?;
                let d = parse_num::<u64>(tokens[1], line_no, "demand")?;
                demands.push((line_no, id, d));
            }
            Section::Depots => {
                for t in tokens {
                    let v = parse_num::<i64>(t, line_no, "depot id")?;
                    if v == -1 {
                        section = Section::Header;
                        break;
                    }
                    if v < 1 {
                        return Err(perr(line_no, format!("invalid depot id {v}")));
                    }
                    depots.push(v as usize);
                }
            }
        }
    }

    let get = |k: &str| header.get(k);
    let name = get("NAME").map(|(_, v)| v.clone()).unwrap_or_default();
    let kind = get("TYPE").map(|(_, v)| v.to_ascii_uppercase()).unwrap_or_else(|| "TSP".into());
    match get("EDGE_WEIGHT_TYPE") {
        Some((_, v)) if v.eq_ignore_ascii_case("EUC_2D") => {}
        Some((line, v)) => return Err(InstanceError::UnsupportedFormat(format!("EDGE_WEIGHT_TYPE {v} (line {line})"))),
        None => return Err(InstanceError::UnsupportedFormat("missing EDGE_WEIGHT_TYPE".into())),
    }
    let dimension = match get("DIMENSION") {
        Some((line, v)) => parse_num::<usize>(v, *line, "DIMENSION")?,
        None => return Err(perr(0, "missing DIMENSION")),
    };
    if coords.len() != dimension {
        let line = coords.last().map_or(0, |c| c.0);
        return Err(perr(line, format!("DIMENSION is {dimension} but {} coordinates were read", coords.len())));
    }
    let mut points = vec![None; dimension];
    for (line, id, p) in &coords {
        if *id == 0 || *id > dimension {
            return Err(perr(*line, format!("node id {id} outside 1..={dimension}")));
        }
        if points[id - 1].replace(*p).is_some() {
            return Err(perr(*line, format!("node id {id} listed twice")));
        }
    }
    let points: Vec<Point> = points.into_iter().map(|p| p.expect("all ids present")).collect();
    let scaling = ScaledCoordinates::fit(&points, Rounding::NearestInteger);
    let unit: Vec<Point> = points.iter().map(|p| scaling.to_unit(*p)).collect();

    let instance = match kind.as_str() {
        "TSP" => Instance::Tsp(TspInstance::new(unit).map_err(|e| perr(0, e.to_string()))?),
        "CVRP" => {
            let capacity = match get("CAPACITY") {
                Some((line, v)) => parse_num::<u32>(v, *line, "CAPACITY")?,
                None => return Err(perr(0, "CVRP file without CAPACITY")),
            };
            let depot = match depots.as_slice() {
                [] => 1,
                [d] => *d,
                _ => return Err(InstanceError::UnsupportedFormat("multiple depots".into())),
            };
            if depot > dimension {
                return Err(perr(0, format!("depot {depot} outside 1..={dimension}")));
            }
            let mut dem = vec![None; dimension];
            for (line, id, d) in &demands {
                if *id == 0 || *id > dimension {
                    return Err(perr(*line, format!("node id {id} outside 1..={dimension}")));
                }
                dem[id - 1] = Some(*d);
            }
            let mut customers = Vec::with_capacity(dimension - 1);
            let mut cust_demands = Vec::with_capacity(dimension - 1);
            for i in 0..dimension {
                if i + 1 == depot {
                    continue;
                }
                let d = dem[i].ok_or_else(|| perr(0, format!("node {} has no demand", i + 1)))?;
                customers.push(unit[i]);
                cust_demands.push(u32::try_from(d).map_err(|_| perr(0, "demand too large"))?);
            }
            Instance::Cvrp(
                CvrpInstance::new(unit[depot - 1], customers, cust_demands, capacity).map_err(|e| perr(0, e.to_string()))?,
            )
        }
        other => return Err(InstanceError::UnsupportedFormat(format!("TYPE {other}"))),
    };
    Ok(LibraryInstance { name, instance, scaling })
}

/// Reads a TSPLIB `TOUR_SECTION` (1-based ids, terminated by -1) as a 0-based tour.
pub fn parse_tour_str(text: &str) -> Result<TspTour, InstanceError> {
    let mut in_section = false;
    let mut order = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.eq_ignore_ascii_case("TOUR_SECTION") {
            in_section = true;
            continue;
        }
        if !in_section || line.is_empty() {
            continue;
        }
        if line.eq_ignore_ascii_case("EOF") {
            break;
        }
        for t in line.split_whitespace() {
            let v = parse_num::<i64>(t, idx + 1, "tour node")?;
            if v == -1 {
                return Ok(TspTour::new(order));
            }
            if v < 1 {
                return Err(perr(idx + 1, format!("invalid tour node {v}")));
            }
            order.push(v as usize - 1);
        }
    }
    if in_section {
        Ok(TspTour::new(order))
    } else {
        Err(perr(0, "missing TOUR_SECTION"))
    }
}

fn starts_numeric(line: &str) -> bool {
    line.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T, InstanceError> {
    s.trim().parse::<T>().map_err(|_| perr(line, format!("invalid {what} {s:?}")))
}
